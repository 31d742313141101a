// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any selected criterion fails. With no arguments all ten run; otherwise
// the arguments name the criteria to run (e.g. `dcmq_acceptance 1 4 9`).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dcmq/dcmq.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using namespace dcmq;
using Clock = std::chrono::steady_clock;
using Rankings = std::vector<std::vector<std::uint32_t>>;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared end-to-end pipeline

SynthConfig e2e_synth(bool range_compress) {
  SynthConfig c;  // seed 42, 8 classes, 2000 / 500 / 100
  c.labels_max = 1;
  c.range_compress = range_compress;
  return c;
}

struct RunResult {
  TrainedModel model;
  Index image_index;
  Index text_index;
  double map_i2t = 0.0;
  double map_t2i = 0.0;
  double entropy = 0.0;  // mean over books, averaged over both gallery indices
  double train_seconds = 0.0;
  double total_seconds = 0.0;
};

Rankings rank_all(const Matrix& queries, const Index& index) {
  Rankings out;
  for (Eigen::Index r = 0; r < queries.rows(); ++r) {
    std::vector<std::uint32_t> ids;
    for (const ScoredId& s : adc_search(queries.row(r).transpose(), index, index.size())) ids.push_back(s.id);
    out.push_back(std::move(ids));
  }
  return out;
}

RunResult run_pipeline(const SynthDataset& ds, const TrainConfig& config) {
  const auto t0 = Clock::now();
  const TrainingData data{ds.train.image, ds.train.text, ds.train.teacher_image, ds.train.teacher_text,
                          ds.train.labels};
  TrainedModel model = train(config, data);
  const double train_s = seconds_since(t0);
  Index img = build_index(encode(model.student.image_head, ds.gallery.image), model.student.codebooks,
                          ds.gallery.labels);
  Index txt = build_index(encode(model.student.text_head, ds.gallery.text), model.student.codebooks,
                          ds.gallery.labels);
  const RelevanceJudge judge(ds.query.labels, ds.gallery.labels);
  RunResult r{std::move(model), std::move(img), std::move(txt)};
  const StudentModel& s = r.model.student;
  r.map_i2t = map_at(rank_all(encode(s.image_head, ds.query.image), r.text_index), judge, 100);
  r.map_t2i = map_at(rank_all(encode(s.text_head, ds.query.text), r.image_index), judge, 100);
  const double e_img = usage_histogram(r.image_index.codes(), s.codebooks.books(), s.codebooks.codewords()).mean_entropy();
  const double e_txt = usage_histogram(r.text_index.codes(), s.codebooks.books(), s.codebooks.codewords()).mean_entropy();
  r.entropy = 0.5 * (e_img + e_txt);
  r.train_seconds = train_s;
  r.total_seconds = seconds_since(t0);
  return r;
}

/// mAP@100 of uniformly random rankings, averaged over 20 seeded draws.
double random_baseline(const SynthDataset& ds) {
  const RelevanceJudge judge(ds.query.labels, ds.gallery.labels);
  SeededRng rng(7);
  double sum = 0.0;
  for (int t = 0; t < 20; ++t) {
    Rankings r;
    for (std::size_t q = 0; q < ds.query.labels.rows(); ++q) {
      std::vector<std::uint32_t> p(ds.gallery.labels.rows());
      std::iota(p.begin(), p.end(), 0U);
      for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
      r.push_back(std::move(p));
    }
    sum += map_at(r, judge, 100);
  }
  return sum / 20.0;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome c1_npc_invariants() {
  const auto t0 = Clock::now();
  SeededRng rng(1);
  std::size_t violations = 0, degenerate_rows = 0;
  for (int t = 0; t < 1000; ++t) {
    Matrix s(64, 64);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = 2.0 * rng.uniform() - 1.0;
    // Every tenth matrix gets a constant row.
    if (t % 10 == 0) {
      s.row(t % 64).setConstant(0.3);
      ++degenerate_rows;
    }
    const Matrix out = npc({s, false}).values;
    for (Eigen::Index i = 0; i < 64; ++i) {
      if (out(i, i) != 1.0) ++violations;
      const double hi = s.row(i).maxCoeff(), lo = s.row(i).minCoeff();
      for (Eigen::Index j = 0; j < 64; ++j) {
        if (out(i, j) < -1.0 - 1e-6 || out(i, j) > 1.0 + 1e-6) ++violations;
        if (j == i) continue;
        // Straight-line pre-override map.
        const double want = hi == lo ? 0.0 : (2.0 * s(i, j) - hi - lo) / (hi - lo);
        if (std::abs(out(i, j) - want) > 1e-12) ++violations;
        if (hi != lo && s(i, j) == hi && std::abs(out(i, j) - 1.0) > 1e-12) ++violations;
        if (hi != lo && s(i, j) == lo && std::abs(out(i, j) + 1.0) > 1e-12) ++violations;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && secs < 5.0,
          std::to_string(violations) + " violations over 1000 matrices (" + std::to_string(degenerate_rows) +
              " degenerate rows), " + fmt("%.2f s (limit 5 s)", secs)};
}

Outcome c2_gumbel() {
  const auto t0 = Clock::now();
  SeededRng rng(2);
  bool bitwise = true;
  for (int t = 0; t < 1000; ++t) {
    const auto k = static_cast<Eigen::Index>(2 + rng.below(30));
    Vector logits(k);
    for (Eigen::Index i = 0; i < k; ++i) logits[i] = 3.0 * rng.normal();
    const double tau = 0.05 + rng.uniform();
    const Vector a = gumbel_softmax_with_noise(logits, Vector::Zero(k), tau);
    const Vector b = softmax_temp(logits, tau);
    bitwise = bitwise && std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(k)) == 0;
  }
  std::vector<int> counts(4, 0);
  const Vector equal = Vector::Zero(4);
  for (int t = 0; t < 100000; ++t) {
    Eigen::Index arg;
    gumbel_softmax(equal, 1.0, rng).probs.maxCoeff(&arg);
    ++counts[static_cast<std::size_t>(arg)];
  }
  double worst = 0.0;
  for (int c : counts) worst = std::max(worst, std::abs(c / 100000.0 - 0.25));
  const double secs = seconds_since(t0);
  return {bitwise && worst <= 0.01 && secs < 10.0,
          std::string("zero-noise bitwise ") + (bitwise ? "yes" : "NO") + ", max |freq - 0.25| = " +
              fmt("%.4f", worst) + " (tol 0.01), " + fmt("%.2f s (limit 10 s)", secs)};
}

Outcome c3_gradients() {
  const auto t0 = Clock::now();
  const double joint = fixture::tiny_gradient_error(true);
  const double plain = fixture::tiny_gradient_error(false);
  const double secs = seconds_since(t0);
  return {joint < 1e-3 && plain < 1e-3 && secs < 30.0,
          "rel. err joint " + fmt("%.2e", joint) + ", non-joint " + fmt("%.2e", plain) + " (tol 1e-3), " +
              fmt("%.2f s (limit 30 s)", secs)};
}

Outcome c4_adc_equivalence() {
  const auto t0 = Clock::now();
  SeededRng rng(4);
  std::size_t mismatches = 0;
  for (std::uint32_t m : {2u, 8u, 16u}) {
    const Codebooks cb = init_codebooks(m, 16, 64, rng);
    Matrix gallery(1000, 64);
    for (Eigen::Index i = 0; i < gallery.size(); ++i) gallery.data()[i] = rng.normal();
    const Index index = build_index(gallery, cb);
    std::vector<std::vector<std::uint32_t>> decoded;
    for (const PQCode& c : index.codes()) decoded.push_back(unpack_code(c, m, 16));
    for (int q = 0; q < 8; ++q) {
      std::vector<double> query(64);
      for (double& v : query) v = rng.normal();
      const Vector qv = Eigen::Map<const Vector>(query.data(), 64);
      // Oracle: score every decoded codeword sequence directly, stable sort.
      std::vector<ScoredId> want;
      for (std::size_t i = 0; i < decoded.size(); ++i) {
        double s = 0.0;
        for (std::uint32_t b = 0; b < m; ++b) {
          const auto word = oracle::to_rows(cb.codeword(b, decoded[i][b]))[0];
          s += oracle::cosine(oracle::slice(query, b * (64 / m), 64 / m), word);
        }
        want.push_back({static_cast<std::uint32_t>(i), s});
      }
      std::stable_sort(want.begin(), want.end(), [](const ScoredId& a, const ScoredId& b) { return a.score > b.score; });
      const RankedList got = adc_search(qv, index, 1000);
      for (std::size_t i = 0; i < want.size(); ++i) mismatches += got[i].id != want[i].id;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          std::to_string(mismatches) + " rank mismatches over M in {2,8,16} x 8 queries x 1000 items, " +
              fmt("%.2f s (limit 10 s)", secs)};
}

Outcome c5_bit_budget() {
  std::ostringstream detail;
  bool ok = true;
  for (auto [m, want] : {std::pair{16u, 8u}, std::pair{2u, 1u}, std::pair{4u, 2u}}) {
    std::vector<std::uint32_t> idx(m, 15);
    const std::size_t got = pack_code(idx, 16).bytes.size();
    ok = ok && got == want && code_bytes(m, 16) == want && m * bits_per_index(16) == want * 8;
    detail << "M=" << m << " K=16 -> " << got << " bytes; ";
  }
  return {ok, detail.str() + "expected 8 / 1 / 2"};
}

Outcome c6_end_to_end(std::optional<RunResult>* keep) {
  const SynthDataset ds = synth_dataset(e2e_synth(false));
  RunResult r = run_pipeline(ds, TrainConfig{});
  const double rnd = random_baseline(ds);
  const bool ok = r.map_i2t >= 0.70 && r.map_t2i >= 0.70 && r.map_i2t >= 3 * rnd && r.map_t2i >= 3 * rnd &&
                  r.total_seconds < 120.0;
  Outcome o{ok, "mAP@100 i2t " + fmt("%.4f", r.map_i2t) + ", t2i " + fmt("%.4f", r.map_t2i) + ", random " +
                    fmt("%.4f", rnd) + " (need >= 0.70 and >= 3x random), " +
                    fmt("%.1f s (limit 120 s)", r.total_seconds)};
  if (keep) keep->emplace(std::move(r));
  return o;
}

Outcome c7_npc_ablation() {
  const SynthDataset ds = synth_dataset(e2e_synth(true));
  double score[3];
  const TargetMode modes[3] = {TargetMode::kNpc, TargetMode::kRaw, TargetMode::kIdentity};
  std::ostringstream detail;
  for (int i = 0; i < 3; ++i) {
    TrainConfig c;
    c.target = modes[i];
    const RunResult r = run_pipeline(ds, c);
    score[i] = 0.5 * (r.map_i2t + r.map_t2i);
    detail << to_string(modes[i]) << " " << fmt("%.4f", score[i]) << " (" << fmt("%.4f", r.map_i2t) << "/"
           << fmt("%.4f", r.map_t2i) << "); ";
  }
  const bool ok = score[0] - score[1] >= 0.03 && score[0] >= score[2];
  detail << "need npc - raw >= 0.03 and npc >= identity";
  return {ok, detail.str()};
}

Outcome c8_gumbel_ablation(const RunResult* with_gumbel) {
  const SynthDataset ds = synth_dataset(e2e_synth(false));
  std::optional<RunResult> on_storage;
  if (!with_gumbel) {
    on_storage.emplace(run_pipeline(ds, TrainConfig{}));
    with_gumbel = &*on_storage;
  }
  TrainConfig off;
  off.lambda = 0.0;
  const RunResult r0 = run_pipeline(ds, off);
  const double map1 = 0.5 * (with_gumbel->map_i2t + with_gumbel->map_t2i);
  const double map0 = 0.5 * (r0.map_i2t + r0.map_t2i);
  const bool ok = with_gumbel->entropy >= r0.entropy && map1 >= map0 - 0.01;
  return {ok, "entropy lambda=1 " + fmt("%.4f", with_gumbel->entropy) + " vs lambda=0 " + fmt("%.4f", r0.entropy) +
                  " bits; mAP@100 " + fmt("%.4f", map1) + " vs " + fmt("%.4f", map0) +
                  " (need entropy1 >= entropy0 and mAP1 >= mAP0 - 0.01)"};
}

Outcome c9_metric_oracle() {
  SeededRng rng(9);
  std::size_t mismatches = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t classes = 2 + rng.below(6);
    const auto g_count = static_cast<std::uint32_t>(5 + rng.below(80));
    const std::size_t q_count = 1 + rng.below(10);
    MultiHotLabels ql(q_count, classes), gl(g_count, classes);
    for (std::size_t r = 0; r < q_count; ++r)
      for (std::size_t c = 0; c < classes; ++c) ql.set(r, c, rng.uniform() < 0.3);
    for (std::size_t r = 0; r < g_count; ++r)
      for (std::size_t c = 0; c < classes; ++c) gl.set(r, c, rng.uniform() < 0.3);
    Rankings rankings;
    for (std::size_t q = 0; q < q_count; ++q) {
      std::vector<std::uint32_t> p(g_count);
      std::iota(p.begin(), p.end(), 0U);
      for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
      rankings.push_back(std::move(p));
    }
    const std::size_t cutoff = 1 + rng.below(g_count);
    const RelevanceJudge judge(ql, gl);

    double ap = 0.0, recall = 0.0;
    std::size_t counted = 0;
    std::vector<double> prec(cutoff, 0.0);
    for (std::size_t q = 0; q < q_count; ++q) {
      auto rel_of = [&](std::uint32_t g) {
        for (std::size_t c = 0; c < classes; ++c)
          if (ql.test(q, c) && gl.test(g, c)) return 1;
        return 0;
      };
      int total = 0;
      for (std::uint32_t g = 0; g < g_count; ++g) total += rel_of(g);
      std::vector<int> rel;
      for (std::uint32_t id : rankings[q]) rel.push_back(rel_of(id));
      int hits = 0;
      for (std::size_t n = 0; n < cutoff; ++n) {
        hits += rel[n];
        prec[n] += static_cast<double>(hits) / static_cast<double>(n + 1);
      }
      if (total == 0) continue;
      ++counted;
      ap += oracle::average_precision(rel, cutoff);
      recall += static_cast<double>(hits) / total;
    }
    const double want_map = counted ? ap / counted : 0.0;
    const double want_recall = counted ? recall / counted : 0.0;
    mismatches += std::abs(map_at(rankings, judge, cutoff) - want_map) > 1e-12;
    mismatches += std::abs(recall_at(rankings, judge, cutoff) - want_recall) > 1e-12;
    const auto curve = precision_curve(rankings, judge, cutoff);
    for (std::size_t n = 0; n < cutoff; ++n)
      mismatches += std::abs(curve[n].second - prec[n] / static_cast<double>(q_count)) > 1e-12;
  }
  const std::vector<std::uint8_t> hand{1, 0, 1, 0};
  const double ap = average_precision_at(hand, 4);
  const bool hand_ok = std::abs(ap - 0.83333) <= 1e-5 && std::abs(ap - 5.0 / 6.0) <= 1e-9;
  return {mismatches == 0 && hand_ok, std::to_string(mismatches) + " mismatches over 50 cases; AP([1,0,1,0], R=4) = " +
                                          fmt("%.9f", ap)};
}

Outcome c10_determinism(const RunResult* first) {
  const SynthDataset ds = synth_dataset(e2e_synth(false));
  std::optional<RunResult> a_storage;
  if (!first) {
    a_storage.emplace(run_pipeline(ds, TrainConfig{}));
    first = &*a_storage;
  }
  const RunResult b = run_pipeline(ds, TrainConfig{});
  const auto dir = std::filesystem::temp_directory_path() / ("dcmq_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  write_model(dir / "a.mdl", first->model);
  write_model(dir / "b.mdl", b.model);
  write_index(dir / "a_img.idx", first->image_index);
  write_index(dir / "b_img.idx", b.image_index);
  write_index(dir / "a_txt.idx", first->text_index);
  write_index(dir / "b_txt.idx", b.text_index);
  const bool model_same = read_file(dir / "a.mdl") == read_file(dir / "b.mdl");
  const bool img_same = read_file(dir / "a_img.idx") == read_file(dir / "b_img.idx");
  const bool txt_same = read_file(dir / "a_txt.idx") == read_file(dir / "b_txt.idx");
  const auto model_bytes = std::filesystem::file_size(dir / "a.mdl");
  std::filesystem::remove_all(dir);
  return {model_same && img_same && txt_same,
          std::string("model ") + (model_same ? "identical" : "DIFFERENT") + " (" + std::to_string(model_bytes) +
              " bytes), image index " + (img_same ? "identical" : "DIFFERENT") + ", text index " +
              (txt_same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int c = std::atoi(argv[i]);
    if (c < 1 || c > 10) {
      std::fprintf(stderr, "usage: %s [criterion 1-10 ...]\n", argv[0]);
      return 1;
    }
    selected.insert(c);
  }
  if (selected.empty())
    for (int c = 1; c <= 10; ++c) selected.insert(c);

  // Criteria 6, 8 and 10 share the seed-42 default run when run together.
  std::optional<RunResult> baseline;

  const char* names[] = {"", "npc-invariants", "gumbel-softmax", "gradient-oracle", "adc-equivalence",
                         "bit-budget", "end-to-end", "npc-ablation", "gumbel-ablation", "metric-oracle",
                         "determinism"};
  int failures = 0;
  for (int c : selected) {
    Outcome o;
    try {
      switch (c) {
        case 1: o = c1_npc_invariants(); break;
        case 2: o = c2_gumbel(); break;
        case 3: o = c3_gradients(); break;
        case 4: o = c4_adc_equivalence(); break;
        case 5: o = c5_bit_budget(); break;
        case 6:
          o = c6_end_to_end(&baseline);
          break;
        case 7: o = c7_npc_ablation(); break;
        case 8: o = c8_gumbel_ablation(baseline ? &*baseline : nullptr); break;
        case 9: o = c9_metric_oracle(); break;
        case 10: o = c10_determinism(baseline ? &*baseline : nullptr); break;
      }
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("[%s] %2d %-16s %s\n", o.pass ? "PASS" : "FAIL", c, names[c], o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(selected.size()) - failures, selected.size());
  return failures == 0 ? 0 : 1;
}
