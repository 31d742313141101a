#pragma once

// Seeded synthetic cross-modal dataset.
//
// Each class owns one random unit prototype per space (image features, text
// features, teacher). A sample draws between labels_min and labels_max
// distinct classes; its vector in a space is the normalized mean of the chosen
// prototypes plus isotropic Gaussian noise with per-coordinate standard
// deviation noise / sqrt(dim), so the expected noise norm is about `noise`.
// Teacher rows are l2-normalized. All values are rounded to 32-bit floats,
// the precision of the files the generator writes. Image and text teacher rows of one sample
// share the prototype mean but draw independent noise.
//
// With range_compress, each teacher row v becomes
//   normalize(sqrt(0.07) v + sqrt(0.12) c + sqrt(0.81) r)
// where c is one shared unit vector and r a fresh random unit vector per row.
// Off-diagonal teacher cosines then fall into roughly [0.05, 0.19].

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcmq/io_formats.hpp"
#include "dcmq/labels.hpp"
#include "dcmq/numerics.hpp"

namespace dcmq {

struct SynthConfig {
  std::uint64_t seed = 42;
  std::uint32_t classes = 8;
  std::uint32_t n_train = 2000;
  std::uint32_t n_gallery = 500;
  std::uint32_t n_query = 100;
  std::uint32_t image_dim = 128;
  std::uint32_t text_dim = 128;
  std::uint32_t teacher_dim = 512;
  double noise = 0.3;
  std::uint32_t labels_min = 1;
  std::uint32_t labels_max = 3;
  bool range_compress = false;

  void validate() const {
    if (classes == 0) throw ParameterError("synth: classes must be positive");
    if (n_train < 2) throw ParameterError("synth: need at least 2 training rows");
    if (image_dim == 0 || text_dim == 0 || teacher_dim == 0) throw ParameterError("synth: dims must be positive");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ParameterError("synth: noise must be >= 0");
    if (labels_min == 0 || labels_min > labels_max || labels_max > classes) {
      throw ParameterError("synth: need 1 <= labels_min <= labels_max <= classes");
    }
  }
};

struct SynthSplit {
  Matrix image;
  Matrix text;
  Matrix teacher_image;
  Matrix teacher_text;
  MultiHotLabels labels;
};

struct SynthDataset {
  SynthSplit train;
  SynthSplit gallery;
  SynthSplit query;
};

namespace detail {

inline Vector random_unit(std::uint32_t dim, SeededRng& rng) {
  Vector v(dim);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
  return l2_normalize(v);
}

inline Matrix random_prototypes(std::uint32_t classes, std::uint32_t dim, SeededRng& rng) {
  Matrix p(classes, dim);
  for (std::uint32_t c = 0; c < classes; ++c) p.row(c) = random_unit(dim, rng).transpose();
  return p;
}

inline Vector noisy_mix(const Matrix& prototypes, const std::vector<std::uint32_t>& chosen,
                        double noise, SeededRng& rng) {
  Vector mean = Vector::Zero(prototypes.cols());
  for (std::uint32_t c : chosen) mean += prototypes.row(c).transpose();
  Vector v = l2_normalize(mean);
  const double sd = noise / std::sqrt(static_cast<double>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += sd * rng.normal();
  return v;
}

}  // namespace detail

/// Deterministic in config.seed. Draw order: prototypes (image, text,
/// teacher), the shared compression direction, then train, gallery and query
/// samples in row order.
inline SynthDataset synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  const Matrix img_proto = detail::random_prototypes(cfg.classes, cfg.image_dim, rng);
  const Matrix txt_proto = detail::random_prototypes(cfg.classes, cfg.text_dim, rng);
  const Matrix teacher_proto = detail::random_prototypes(cfg.classes, cfg.teacher_dim, rng);
  const Vector shared = detail::random_unit(cfg.teacher_dim, rng);

  auto teacher_row = [&](const std::vector<std::uint32_t>& chosen) {
    Vector v = l2_normalize(detail::noisy_mix(teacher_proto, chosen, cfg.noise, rng));
    if (cfg.range_compress) {
      const Vector r = detail::random_unit(cfg.teacher_dim, rng);
      v = l2_normalize(std::sqrt(0.07) * v + std::sqrt(0.12) * shared + std::sqrt(0.81) * r);
    }
    return v;
  };

  auto make_split = [&](std::uint32_t rows) {
    SynthSplit s{Matrix(rows, cfg.image_dim), Matrix(rows, cfg.text_dim),
                 Matrix(rows, cfg.teacher_dim), Matrix(rows, cfg.teacher_dim),
                 MultiHotLabels(rows, cfg.classes)};
    std::vector<std::uint32_t> pool(cfg.classes);
    for (std::uint32_t r = 0; r < rows; ++r) {
      const auto count = cfg.labels_min +
                         static_cast<std::uint32_t>(rng.below(cfg.labels_max - cfg.labels_min + 1));
      for (std::uint32_t c = 0; c < cfg.classes; ++c) pool[c] = c;
      for (std::uint32_t i = 0; i < count; ++i) {
        std::swap(pool[i], pool[i + rng.below(cfg.classes - i)]);
      }
      std::vector<std::uint32_t> chosen(pool.begin(), pool.begin() + count);
      std::sort(chosen.begin(), chosen.end());
      for (std::uint32_t c : chosen) s.labels.set(r, c);
      s.image.row(r) = detail::noisy_mix(img_proto, chosen, cfg.noise, rng).transpose();
      s.text.row(r) = detail::noisy_mix(txt_proto, chosen, cfg.noise, rng).transpose();
      s.teacher_image.row(r) = teacher_row(chosen).transpose();
      s.teacher_text.row(r) = teacher_row(chosen).transpose();
    }
    // Match what the files hold.
    for (Matrix* m : {&s.image, &s.text, &s.teacher_image, &s.teacher_text}) {
      *m = m->cast<float>().cast<double>();
    }
    return s;
  };

  SynthDataset ds;
  ds.train = make_split(cfg.n_train);
  ds.gallery = make_split(cfg.n_gallery);
  ds.query = make_split(cfg.n_query);
  return ds;
}

/// Writes <split>_img.emb, <split>_txt.emb, <split>_teacher_img.emb,
/// <split>_teacher_txt.emb and <split>.lbl for split in {train, gallery,
/// query}. Returns the written paths in that order.
inline std::vector<std::filesystem::path> write_synth_dataset(const SynthDataset& ds,
                                                              const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> written;
  const std::pair<const char*, const SynthSplit*> splits[] = {
      {"train", &ds.train}, {"gallery", &ds.gallery}, {"query", &ds.query}};
  for (const auto& [name, split] : splits) {
    const std::string n = name;
    const std::pair<std::string, const Matrix*> embs[] = {{n + "_img.emb", &split->image},
                                                          {n + "_txt.emb", &split->text},
                                                          {n + "_teacher_img.emb", &split->teacher_image},
                                                          {n + "_teacher_txt.emb", &split->teacher_text}};
    for (const auto& [file, m] : embs) {
      write_embeddings(dir / file, *m);
      written.push_back(dir / file);
    }
    write_labels(dir / (n + ".lbl"), split->labels);
    written.push_back(dir / (n + ".lbl"));
  }
  return written;
}

/// Loads one split written by write_synth_dataset.
inline SynthSplit read_synth_split(const std::filesystem::path& dir, const std::string& name) {
  return {read_embeddings(dir / (name + "_img.emb")), read_embeddings(dir / (name + "_txt.emb")),
          read_embeddings(dir / (name + "_teacher_img.emb")),
          read_embeddings(dir / (name + "_teacher_txt.emb")), read_labels(dir / (name + ".lbl"))};
}

}  // namespace dcmq
