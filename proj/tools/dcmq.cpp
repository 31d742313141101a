// dcmq: synthesize data, train, index, search, evaluate and inspect.
//
// Exit codes: 0 success, 1 usage error, 2 data/format/IO error, 3 divergence.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dcmq/dcmq.hpp"

namespace {

using namespace dcmq;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& line) { std::cerr << "dcmq: " << line << "\n"; }

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

void close_out(std::ofstream& out, const fs::path& path) {
  out.close();
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

std::string csv_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

bool is_image(const std::string& modality) {
  if (modality == "image") return true;
  if (modality == "text") return false;
  throw UsageError("--modality must be 'image' or 'text', got '" + modality + "'");
}

/// DCMQ_THREADS: unset or 0 runs sequentially.
unsigned search_threads() {
  const char* env = std::getenv("DCMQ_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 0) throw UsageError(std::string("DCMQ_THREADS must be a non-negative integer, got '") + env + "'");
  return static_cast<unsigned>(v);
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  SynthConfig config;
  std::string out_dir;
};

void run_synth(const SynthArgs& a) {
  const SynthDataset ds = synth_dataset(a.config);
  for (const fs::path& p : write_synth_dataset(ds, a.out_dir)) {
    std::cout << p.string() << " " << fs::file_size(p) << "\n";
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config_path;
  std::map<std::string, std::string> paths;  // images, texts, teacher_img, teacher_txt, labels, out, loss_out
  std::optional<std::string> target;
  bool no_gumbel = false;
  bool no_joint = false;
  bool global_targets = false;
};

const std::vector<std::string> kPathKeys = {"images", "texts", "teacher_img", "teacher_txt", "labels", "out", "loss_out"};

void load_config_file(const std::string& path, TrainConfig& config, std::map<std::string, std::string>& paths) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(number) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (std::find(kPathKeys.begin(), kPathKeys.end(), key) != kPathKeys.end()) {
      paths[key] = value;
    } else if (!apply_setting(config, key, value)) {
      throw UsageError(path + ":" + std::to_string(number) + ": unknown key '" + key + "'");
    }
  }
}

int run_train(const TrainArgs& a) {
  TrainConfig config;
  std::map<std::string, std::string> paths;
  if (!a.config_path.empty()) load_config_file(a.config_path, config, paths);
  for (const auto& [k, v] : a.paths) {
    if (!v.empty()) paths[k] = v;
  }
  if (a.target) config.target = parse_target_mode(*a.target);
  if (a.no_gumbel) config.use_gumbel = false;
  if (a.no_joint) config.joint_training = false;
  if (a.global_targets) config.global_targets = true;
  config.validate();
  for (std::string key : {"images", "texts", "teacher_img", "teacher_txt", "out"}) {
    if (!paths[key].empty()) continue;
    std::replace(key.begin(), key.end(), '_', '-');
    throw UsageError("train: missing --" + key);
  }

  TrainingData data{read_embeddings(paths["images"]), read_embeddings(paths["texts"]),
                    read_embeddings(paths["teacher_img"]), read_embeddings(paths["teacher_txt"]), {}};
  if (!paths["labels"].empty()) data.labels = read_labels(paths["labels"]);
  log("training on " + std::to_string(data.image_features.rows()) + " pairs, M=" + std::to_string(config.books) +
      " K=" + std::to_string(config.codewords) + " (" + std::to_string(config.books * bits_per_index(config.codewords)) +
      " bits), target " + to_string(config.target));

  const TrainedModel model = train(config, data);
  const auto means = model.epoch_means();
  for (std::size_t e = 0; e < means.size(); ++e) log("epoch " + std::to_string(e) + " mean loss " + csv_double(means[e]));

  write_model(paths["out"], model);
  const fs::path loss_path = paths["loss_out"].empty() ? fs::path(paths["out"] + ".loss.csv") : fs::path(paths["loss_out"]);
  std::ofstream csv = open_out(loss_path);
  csv << "epoch,batch,loss\n";
  for (const LossRecord& r : model.trace) csv << r.epoch << "," << r.batch << "," << csv_double(r.loss) << "\n";
  close_out(csv, loss_path);
  std::cout << paths["out"] << "\n" << loss_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// build-index

struct IndexArgs {
  std::string model, gallery, modality = "image", labels, out;
};

void run_build_index(const IndexArgs& a) {
  const bool image = is_image(a.modality);
  const TrainedModel model = read_model(a.model);
  const Matrix features = read_embeddings(a.gallery);
  const MLPHead& head = image ? model.student.image_head : model.student.text_head;
  std::optional<MultiHotLabels> labels;
  if (!a.labels.empty()) labels = read_labels(a.labels);
  Matrix embedded(0, model.student.codebooks.dim());
  if (features.rows() > 0) embedded = encode(head, features);
  const Index index = build_index(embedded, model.student.codebooks, std::move(labels));
  write_index(a.out, index);
  log("indexed " + std::to_string(index.size()) + " " + a.modality + " items, " +
      std::to_string(code_bytes(index.books(), index.codewords())) + " bytes per code");
}

// ---------------------------------------------------------------------------
// search

struct SearchArgs {
  std::string model, index, queries, modality = "image", out;
  std::size_t topk = 1000;
};

void run_search(const SearchArgs& a) {
  const bool image = is_image(a.modality);
  if (a.topk == 0) throw UsageError("--topk must be at least 1");
  const TrainedModel model = read_model(a.model);
  const Index index = read_index(a.index);
  if (!(model.student.codebooks == index.codebooks())) {
    throw ShapeError("index was not built with this model's codebooks");
  }
  const Matrix features = read_embeddings(a.queries);
  const MLPHead& head = image ? model.student.image_head : model.student.text_head;
  const Matrix queries = features.rows() > 0 ? encode(head, features) : Matrix(0, index.codebooks().dim());

  std::vector<RankedList> results(static_cast<std::size_t>(queries.rows()));
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t q = begin; q < results.size(); q += step) {
      results[q] = adc_search(queries.row(static_cast<Eigen::Index>(q)).transpose(), index, a.topk);
    }
  };
  const unsigned threads = std::min<unsigned>(search_threads(), static_cast<unsigned>(results.size()));
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }

  std::ofstream csv = open_out(a.out);
  csv << "query_id,rank,gallery_id,score\n";
  for (std::size_t q = 0; q < results.size(); ++q) {
    for (std::size_t r = 0; r < results[q].size(); ++r) {
      csv << q << "," << r + 1 << "," << results[q][r].id << "," << csv_double(results[q][r].score) << "\n";
    }
  }
  close_out(csv, a.out);
  log("searched " + std::to_string(results.size()) + " queries against " + std::to_string(index.size()) + " items");
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string rankings, labels_q, labels_g, out, curve_out, recall_curve_out;
  std::string ap_denominator = "retrieved";
  std::size_t map_at = 5000, top = 1000, recall_at = 1000, stride = 1;
};

/// Reads `query_id,rank,gallery_id,score` rows into per-query id lists
/// ordered by rank.
std::vector<std::vector<std::uint32_t>> read_rankings(const std::string& path, std::size_t queries) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open rankings '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "query_id,rank,gallery_id,score") {
    throw FormatError(path + ": expected header 'query_id,rank,gallery_id,score'");
  }
  std::vector<std::vector<std::pair<std::uint64_t, std::uint32_t>>> rows(queries);
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::uint64_t q = 0, rank = 0, g = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ss >> q >> c1 >> rank >> c2 >> g >> c3) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw FormatError(path + ":" + std::to_string(number) + ": malformed ranking row");
    }
    if (q >= queries) {
      throw FormatError(path + ":" + std::to_string(number) + ": query id " + std::to_string(q) +
                        " has no query label row");
    }
    if (g > 0xFFFFFFFFULL) throw FormatError(path + ":" + std::to_string(number) + ": gallery id too large");
    rows[q].emplace_back(rank, static_cast<std::uint32_t>(g));
  }
  std::vector<std::vector<std::uint32_t>> out(queries);
  for (std::size_t q = 0; q < queries; ++q) {
    std::stable_sort(rows[q].begin(), rows[q].end());
    for (const auto& [rank, g] : rows[q]) out[q].push_back(g);
  }
  return out;
}

void run_eval(const EvalArgs& a) {
  ApDenominator denom;
  if (a.ap_denominator == "retrieved") denom = ApDenominator::kRetrieved;
  else if (a.ap_denominator == "min-relevant") denom = ApDenominator::kMinRelevantOrR;
  else throw UsageError("--ap-denominator must be 'retrieved' or 'min-relevant'");
  if (a.map_at == 0 || a.top == 0 || a.recall_at == 0 || a.stride == 0) {
    throw UsageError("--map-at, --top, --recall-at and --stride must be positive");
  }
  const MultiHotLabels lq = read_labels(a.labels_q);
  const MultiHotLabels lg = read_labels(a.labels_g);
  const RelevanceJudge judge(lq, lg);
  const auto rankings = read_rankings(a.rankings, lq.rows());

  const double map = map_at(rankings, judge, a.map_at, denom);
  const auto precision = precision_curve(rankings, judge, a.top, a.stride);
  const auto recall = recall_curve(rankings, judge, a.recall_at, a.stride);

  std::ofstream csv = open_out(a.out);
  csv << "metric,value\n";
  csv << "map@" << a.map_at << "," << csv_double(map) << "\n";
  csv << "precision@" << a.top << "," << csv_double(precision.back().second) << "\n";
  csv << "recall@" << a.recall_at << "," << csv_double(recall.back().second) << "\n";
  close_out(csv, a.out);
  if (!a.curve_out.empty()) {
    std::ofstream c = open_out(a.curve_out);
    c << "cutoff,precision\n";
    for (const auto& [n, p] : precision) c << n << "," << csv_double(p) << "\n";
    close_out(c, a.curve_out);
  }
  if (!a.recall_curve_out.empty()) {
    std::ofstream c = open_out(a.recall_curve_out);
    c << "cutoff,recall\n";
    for (const auto& [n, r] : recall) c << n << "," << csv_double(r) << "\n";
    close_out(c, a.recall_curve_out);
  }
  std::cout << "map@" << a.map_at << " " << csv_double(map) << "\n";
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string index, out, entropy_out;
};

void run_inspect(const InspectArgs& a) {
  const Index index = read_index(a.index);
  const UsageHistogram h = usage_histogram(index.codes(), index.books(), index.codewords());
  std::ofstream csv = open_out(a.out);
  csv << "book,codeword,count\n";
  for (std::uint32_t m = 0; m < h.books; ++m) {
    for (std::uint32_t k = 0; k < h.codewords; ++k) csv << m << "," << k << "," << h.count(m, k) << "\n";
  }
  close_out(csv, a.out);
  if (!a.entropy_out.empty()) {
    std::ofstream e = open_out(a.entropy_out);
    e << "book,entropy_bits\n";
    for (std::uint32_t m = 0; m < h.books; ++m) e << m << "," << csv_double(h.entropy_bits[m]) << "\n";
    close_out(e, a.entropy_out);
  }
  std::cout << "mean_entropy_bits " << csv_double(h.mean_entropy()) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal product quantization with distilled teacher targets"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a seeded synthetic dataset");
  s->add_option("--seed", synth.config.seed);
  s->add_option("--classes", synth.config.classes);
  s->add_option("--train", synth.config.n_train);
  s->add_option("--gallery", synth.config.n_gallery);
  s->add_option("--query", synth.config.n_query);
  s->add_option("--img-dim", synth.config.image_dim);
  s->add_option("--txt-dim", synth.config.text_dim);
  s->add_option("--teacher-dim", synth.config.teacher_dim);
  s->add_option("--noise", synth.config.noise);
  s->add_option("--labels-min", synth.config.labels_min);
  s->add_option("--labels-max", synth.config.labels_max);
  s->add_flag("--range-compress", synth.config.range_compress);
  s->add_option("--out-dir", synth.out_dir)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a student model");
  t->add_option("--config", tr.config_path, "key=value file; flags override it");
  t->add_option("--images", tr.paths["images"]);
  t->add_option("--texts", tr.paths["texts"]);
  t->add_option("--teacher-img", tr.paths["teacher_img"]);
  t->add_option("--teacher-txt", tr.paths["teacher_txt"]);
  t->add_option("--labels", tr.paths["labels"]);
  t->add_option("--out", tr.paths["out"]);
  t->add_option("--loss-out", tr.paths["loss_out"], "loss CSV (default <out>.loss.csv)");
  t->add_option("--target", tr.target, "npc|raw|identity|multihot");
  t->add_flag("--no-gumbel", tr.no_gumbel);
  t->add_flag("--no-joint", tr.no_joint);
  t->add_flag("--global-targets", tr.global_targets);

  IndexArgs ix;
  auto* b = app.add_subcommand("build-index", "Encode and pack a gallery");
  b->add_option("--model", ix.model)->required();
  b->add_option("--gallery", ix.gallery)->required();
  b->add_option("--modality", ix.modality, "image|text");
  b->add_option("--labels", ix.labels);
  b->add_option("--out", ix.out)->required();

  SearchArgs se;
  auto* q = app.add_subcommand("search", "Rank an index for each query");
  q->add_option("--model", se.model)->required();
  q->add_option("--index", se.index)->required();
  q->add_option("--queries", se.queries)->required();
  q->add_option("--modality", se.modality, "query modality: image|text");
  q->add_option("--topk", se.topk);
  q->add_option("--out", se.out)->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "mAP, precision and recall from a rankings CSV");
  e->add_option("--rankings", ev.rankings)->required();
  e->add_option("--labels-q", ev.labels_q)->required();
  e->add_option("--labels-g", ev.labels_g)->required();
  e->add_option("--map-at", ev.map_at);
  e->add_option("--top", ev.top);
  e->add_option("--recall-at", ev.recall_at);
  e->add_option("--stride", ev.stride, "curve spacing");
  e->add_option("--ap-denominator", ev.ap_denominator, "retrieved|min-relevant");
  e->add_option("--out", ev.out)->required();
  e->add_option("--curve-out", ev.curve_out, "precision curve CSV");
  e->add_option("--recall-curve-out", ev.recall_curve_out, "recall curve CSV");

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "Codeword usage of an index");
  i->add_option("--index", in.index)->required();
  i->add_option("--out", in.out)->required();
  i->add_option("--entropy-out", in.entropy_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s) run_synth(synth);
    else if (*t) return run_train(tr);
    else if (*b) run_build_index(ix);
    else if (*q) run_search(se);
    else if (*e) run_eval(ev);
    else if (*i) run_inspect(in);
    return 0;
  } catch (const UsageError& err) {
    log(std::string("error: ") + err.what());
    return 1;
  } catch (const ParameterError& err) {
    log(std::string("error: ") + err.what());
    return 1;
  } catch (const DivergenceError& err) {
    log(std::string("diverged: ") + err.what());
    return 3;
  } catch (const Error& err) {
    log(std::string("error: ") + err.what());
    return 2;
  } catch (const std::exception& err) {
    log(std::string("error: ") + err.what());
    return 2;
  }
}
