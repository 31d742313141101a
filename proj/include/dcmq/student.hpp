#pragma once

// Student encoders and the cross-modal distillation objective.
//
// Each modality has an MLP projection head whose l2-normalized output x is
// soft-quantized into z against codebooks shared by both modalities. The
// batch similarity matrices z_img . x_txt^T and z_txt . x_img^T are pushed
// toward the teacher target T (and T^T) with a tempered-softmax cross
// entropy. Gradients are derived by hand; see tests/test_student.cpp for the
// finite-difference check.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dcmq/labels.hpp"
#include "dcmq/numerics.hpp"
#include "dcmq/quantizer.hpp"
#include "dcmq/teacher_targets.hpp"

namespace dcmq {

// ---------------------------------------------------------------------------
// MLP head

/// Hidden-layer activation: SiLU, f(a) = a * sigmoid(a).
inline double silu(double a) { return a / (1.0 + std::exp(-a)); }

/// f'(a) = s(a) * (1 + a * (1 - s(a))), s = sigmoid.
inline double silu_grad(double a) {
  const double s = 1.0 / (1.0 + std::exp(-a));
  return s * (1.0 + a * (1.0 - s));
}

/// Fully-connected layers; SiLU on hidden layers, linear output.
struct MLPHead {
  std::vector<Matrix> weights;  // layer l: out x in
  std::vector<Vector> biases;

  std::size_t layers() const noexcept { return weights.size(); }
  Eigen::Index input_dim() const { return weights.empty() ? 0 : weights.front().cols(); }
  Eigen::Index output_dim() const { return weights.empty() ? 0 : weights.back().rows(); }

  std::vector<std::uint32_t> dims() const {
    std::vector<std::uint32_t> out;
    if (weights.empty()) return out;
    out.push_back(static_cast<std::uint32_t>(weights.front().cols()));
    for (const Matrix& w : weights) out.push_back(static_cast<std::uint32_t>(w.rows()));
    return out;
  }

  /// LeCun-normal weights (std 1/sqrt(fan_in)), zero biases.
  static MLPHead init(std::span<const std::uint32_t> dims, SeededRng& rng) {
    if (dims.size() < 2) throw ParameterError("MLPHead: need at least input and output dims");
    MLPHead head;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      if (dims[l] == 0 || dims[l + 1] == 0) throw ParameterError("MLPHead: zero layer width");
      Matrix w(dims[l + 1], dims[l]);
      const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.normal();
      }
      head.weights.push_back(std::move(w));
      head.biases.push_back(Vector::Zero(dims[l + 1]));
    }
    return head;
  }

  friend bool operator==(const MLPHead& a, const MLPHead& b) {
    if (a.dims() != b.dims()) return false;
    for (std::size_t l = 0; l < a.layers(); ++l) {
      if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
    }
    return true;
  }
};

struct HeadCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  Matrix raw;                  // last-layer output before normalization
  Matrix out;                  // l2-normalized rows
};

/// Runs the head over N feature rows and returns l2-normalized N x D outputs.
inline Matrix forward(const MLPHead& head, const Matrix& features, HeadCache* cache = nullptr) {
  if (head.layers() == 0) throw ShapeError("forward: empty head");
  if (features.cols() != head.input_dim()) {
    throw ShapeError("forward: feature dim " + std::to_string(features.cols()) +
                     " != head input dim " + std::to_string(head.input_dim()));
  }
  require_finite(features, "forward");
  Matrix act = features;
  for (std::size_t l = 0; l < head.layers(); ++l) {
    Matrix pre = act * head.weights[l].transpose();
    pre.rowwise() += head.biases[l].transpose();
    if (cache) {
      cache->inputs.push_back(act);
      cache->pre.push_back(pre);
    }
    if (l + 1 < head.layers()) {
      act = pre.unaryExpr([](double a) { return silu(a); });
    } else {
      act = std::move(pre);
    }
  }
  Matrix out = l2_normalize_rows(act);
  if (cache) {
    cache->raw = std::move(act);
    cache->out = out;
  }
  return out;
}

/// Gradient of y = u / |u| per row; zero rows pass no gradient.
inline Matrix normalize_rows_backward(const Matrix& raw, const Matrix& unit, const Matrix& grad_unit) {
  Matrix g(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const double n = raw.row(r).norm();
    if (n == 0.0) {
      g.row(r).setZero();
      continue;
    }
    const double proj = unit.row(r).dot(grad_unit.row(r));
    g.row(r) = (grad_unit.row(r) - proj * unit.row(r)) / n;
  }
  return g;
}

/// Accumulates parameter gradients into grads given dL/d(normalized output).
inline void head_backward(const MLPHead& head, const HeadCache& cache, const Matrix& grad_out,
                          MLPHead& grads) {
  Matrix g = normalize_rows_backward(cache.raw, cache.out, grad_out);
  for (std::size_t l = head.layers(); l-- > 0;) {
    grads.weights[l] += g.transpose() * cache.inputs[l];
    grads.biases[l] += g.colwise().sum().transpose();
    if (l == 0) break;
    Matrix g_in = g * head.weights[l];
    const Matrix& pre = cache.pre[l - 1];
    for (Eigen::Index r = 0; r < g_in.rows(); ++r) {
      for (Eigen::Index c = 0; c < g_in.cols(); ++c) g_in(r, c) *= silu_grad(pre(r, c));
    }
    g = std::move(g_in);
  }
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::uint32_t books = 16;       // M
  std::uint32_t codewords = 16;   // K
  std::uint32_t dim = 256;        // D
  double lambda = 1.0;
  double tau_soft = 0.2;
  double tau_gumbel = 1.0;
  double tau_ce = 0.2;
  double lr = 1e-5;
  std::uint32_t epochs = 20;
  std::uint32_t lr_drop_epoch = 10;  // lr / 10 from this epoch on
  std::uint32_t batch_size = 64;
  std::uint64_t seed = 42;
  bool joint_training = true;
  bool use_gumbel = true;
  bool global_targets = false;
  TargetMode target = TargetMode::kNpc;
  std::vector<std::uint32_t> image_hidden{512};
  std::vector<std::uint32_t> text_hidden{1024, 512};

  PqgParams pqg() const { return {use_gumbel ? lambda : 0.0, tau_soft, tau_gumbel}; }

  void validate() const {
    if (books == 0 || dim % books != 0) throw ParameterError("dim must be divisible by books");
    bits_per_index(codewords);
    pqg().validate();
    if (!(tau_ce > 0.0)) throw ParameterError("tau_ce must be positive");
    if (!(lr > 0.0)) throw ParameterError("lr must be positive");
    if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_dims(const std::vector<std::uint32_t>& dims) {
  std::string out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(dims[i]);
  }
  return out;
}

inline std::vector<std::uint32_t> parse_dims(const std::string& key, const std::string& text) {
  std::vector<std::uint32_t> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::exception&) {
      throw ParameterError("bad value for " + key + ": '" + text + "'");
    }
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    T v;
    if constexpr (std::is_floating_point_v<T>) {
      v = static_cast<T>(std::stod(text, &used));
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
      v = static_cast<T>(std::stoull(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ParameterError("bad value for " + key + ": '" + text + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ParameterError("bad boolean for " + key + ": '" + text + "'");
}

}  // namespace detail

/// Ordered key=value view of a config; the inverse of apply_setting.
inline std::vector<std::pair<std::string, std::string>> to_settings(const TrainConfig& c) {
  using detail::format_double;
  return {{"books", std::to_string(c.books)},
          {"codewords", std::to_string(c.codewords)},
          {"dim", std::to_string(c.dim)},
          {"lambda", format_double(c.lambda)},
          {"tau_soft", format_double(c.tau_soft)},
          {"tau_gumbel", format_double(c.tau_gumbel)},
          {"tau_ce", format_double(c.tau_ce)},
          {"lr", format_double(c.lr)},
          {"epochs", std::to_string(c.epochs)},
          {"lr_drop_epoch", std::to_string(c.lr_drop_epoch)},
          {"batch_size", std::to_string(c.batch_size)},
          {"seed", std::to_string(c.seed)},
          {"joint_training", c.joint_training ? "true" : "false"},
          {"gumbel", c.use_gumbel ? "true" : "false"},
          {"global_targets", c.global_targets ? "true" : "false"},
          {"target", to_string(c.target)},
          {"image_hidden", detail::join_dims(c.image_hidden)},
          {"text_hidden", detail::join_dims(c.text_hidden)}};
}

/// Sets one field by name. Returns false for keys TrainConfig does not own.
inline bool apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "books") c.books = parse_number<std::uint32_t>(key, value);
  else if (key == "codewords") c.codewords = parse_number<std::uint32_t>(key, value);
  else if (key == "dim") c.dim = parse_number<std::uint32_t>(key, value);
  else if (key == "lambda") c.lambda = parse_number<double>(key, value);
  else if (key == "tau_soft") c.tau_soft = parse_number<double>(key, value);
  else if (key == "tau_gumbel") c.tau_gumbel = parse_number<double>(key, value);
  else if (key == "tau_ce") c.tau_ce = parse_number<double>(key, value);
  else if (key == "lr") c.lr = parse_number<double>(key, value);
  else if (key == "epochs") c.epochs = parse_number<std::uint32_t>(key, value);
  else if (key == "lr_drop_epoch") c.lr_drop_epoch = parse_number<std::uint32_t>(key, value);
  else if (key == "batch_size") c.batch_size = parse_number<std::uint32_t>(key, value);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "joint_training") c.joint_training = detail::parse_bool(key, value);
  else if (key == "gumbel") c.use_gumbel = detail::parse_bool(key, value);
  else if (key == "global_targets") c.global_targets = detail::parse_bool(key, value);
  else if (key == "target") c.target = parse_target_mode(value);
  else if (key == "image_hidden") c.image_hidden = detail::parse_dims(key, value);
  else if (key == "text_hidden") c.text_hidden = detail::parse_dims(key, value);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Model

struct StudentModel {
  MLPHead image_head;
  MLPHead text_head;
  Codebooks codebooks;

  friend bool operator==(const StudentModel&, const StudentModel&) = default;
};

inline StudentModel init_student(const TrainConfig& config, std::uint32_t image_features,
                                 std::uint32_t text_features, SeededRng& rng) {
  config.validate();
  std::vector<std::uint32_t> img{image_features};
  img.insert(img.end(), config.image_hidden.begin(), config.image_hidden.end());
  img.push_back(config.dim);
  std::vector<std::uint32_t> txt{text_features};
  txt.insert(txt.end(), config.text_hidden.begin(), config.text_hidden.end());
  txt.push_back(config.dim);
  StudentModel model;
  model.image_head = MLPHead::init(img, rng);
  model.text_head = MLPHead::init(txt, rng);
  model.codebooks = init_codebooks(config.books, config.codewords, config.dim, rng);
  return model;
}

/// Same shapes as model, all zeros. Used as the gradient accumulator.
inline StudentModel zeros_like(const StudentModel& model) {
  StudentModel z = model;
  for (MLPHead* h : {&z.image_head, &z.text_head}) {
    for (Matrix& w : h->weights) w.setZero();
    for (Vector& b : h->biases) b.setZero();
  }
  z.codebooks.words().setZero();
  return z;
}

/// Every parameter tensor as a flat span, in a fixed order: image layers
/// (weight, bias), text layers (weight, bias), codewords.
inline std::vector<std::span<double>> parameter_spans(StudentModel& model) {
  std::vector<std::span<double>> out;
  for (MLPHead* h : {&model.image_head, &model.text_head}) {
    for (std::size_t l = 0; l < h->layers(); ++l) {
      out.emplace_back(h->weights[l].data(), static_cast<std::size_t>(h->weights[l].size()));
      out.emplace_back(h->biases[l].data(), static_cast<std::size_t>(h->biases[l].size()));
    }
  }
  Matrix& w = model.codebooks.words();
  out.emplace_back(w.data(), static_cast<std::size_t>(w.size()));
  return out;
}

/// Rounds every parameter to the nearest 32-bit float, the on-disk precision,
/// so a model compares equal to its own serialized form.
inline void round_to_storage(StudentModel& model) {
  for (const auto& p : parameter_spans(model)) {
    for (double& v : p) v = static_cast<double>(static_cast<float>(v));
  }
}

// ---------------------------------------------------------------------------
// Loss

/// Cross entropy between row-softmax(T / tau) and row-softmax(A B^T / tau),
/// averaged over rows. Optionally returns dL/dA and dL/dB.
inline double cross_modal_loss(const Matrix& a, const Matrix& b, const Matrix& target, double tau,
                               Matrix* grad_a = nullptr, Matrix* grad_b = nullptr) {
  if (!(tau > 0.0)) throw ParameterError("cross_modal_loss: tau_ce must be positive");
  if (a.cols() != b.cols() || a.rows() != target.rows() || b.rows() != target.cols()) {
    throw ShapeError("cross_modal_loss: shape mismatch");
  }
  const Eigen::Index n = a.rows();
  const Matrix logits = (a * b.transpose()) / tau;
  Matrix g(n, b.rows());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector q = softmax_temp(target.row(i).transpose(), tau);
    const double peak = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(logits(i, j) - peak);
    const double log_z = peak + std::log(sum);
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double log_p = logits(i, j) - log_z;
      loss -= q[j] * log_p;
      g(i, j) = std::exp(log_p) - q[j];
    }
  }
  loss /= static_cast<double>(n);
  if (grad_a || grad_b) {
    g /= static_cast<double>(n) * tau;
    if (grad_a) *grad_a = g * b;
    if (grad_b) *grad_b = g.transpose() * a;
  }
  return loss;
}

/// Mean row entropy of row-softmax(T / tau): the floor of cross_modal_loss.
inline double target_entropy(const Matrix& target, double tau) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < target.rows(); ++i) {
    const Vector q = softmax_temp(target.row(i).transpose(), tau);
    for (Eigen::Index j = 0; j < q.size(); ++j) {
      if (q[j] > 0.0) h -= q[j] * std::log(q[j]);
    }
  }
  return h / static_cast<double>(target.rows());
}

/// Gumbel noise for one batch: N x (M*K) per modality, row r book-major.
struct BatchNoise {
  Matrix image;
  Matrix text;

  static BatchNoise zeros(Eigen::Index rows, const Codebooks& cb) {
    const Eigen::Index w = static_cast<Eigen::Index>(cb.books()) * cb.codewords();
    return {Matrix::Zero(rows, w), Matrix::Zero(rows, w)};
  }

  /// Image rows first, then text rows; each row book-major with K draws per book.
  static BatchNoise sample(Eigen::Index rows, const Codebooks& cb, SeededRng& rng) {
    BatchNoise n = zeros(rows, cb);
    for (Matrix* m : {&n.image, &n.text}) {
      for (Eigen::Index r = 0; r < m->rows(); ++r) {
        for (Eigen::Index c = 0; c < m->cols(); ++c) (*m)(r, c) = rng.gumbel();
      }
    }
    return n;
  }
};

namespace detail {

struct ModalityPass {
  HeadCache head;
  std::vector<SoftQuantized> soft;
  Matrix z_raw;
  Matrix z;
};

inline ModalityPass run_modality(const MLPHead& head, const Codebooks& cb, const PqgParams& params,
                                 const Matrix& features, const Matrix& noise) {
  ModalityPass pass;
  forward(head, features, &pass.head);
  const Matrix& x = pass.head.out;
  if (x.cols() != static_cast<Eigen::Index>(cb.dim())) {
    throw ShapeError("head output dim " + std::to_string(x.cols()) + " != codebook dim " +
                     std::to_string(cb.dim()));
  }
  pass.z_raw.resize(x.rows(), x.cols());
  pass.soft.reserve(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Matrix book_noise =
        Eigen::Map<const Matrix>(noise.row(r).data(), cb.books(), cb.codewords());
    pass.soft.push_back(pqg_soft_quantize_with_noise(x.row(r).transpose(), cb, params, book_noise));
    pass.z_raw.row(r) = pass.soft.back().z.transpose();
  }
  pass.z = l2_normalize_rows(pass.z_raw);
  return pass;
}

/// Pushes dL/dz back through normalization and the quantizer; returns dL/dx.
inline Matrix quantizer_backward(const ModalityPass& pass, const Codebooks& cb,
                                 const PqgParams& params, const Matrix& grad_z, Matrix& grad_words) {
  const Matrix grad_z_raw = normalize_rows_backward(pass.z_raw, pass.z, grad_z);
  const Matrix& x = pass.head.out;
  Matrix grad_x = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Vector gx = Vector::Zero(x.cols());
    pqg_backward(x.row(r).transpose(), cb, params, pass.soft[static_cast<std::size_t>(r)],
                 grad_z_raw.row(r).transpose(), gx, grad_words);
    grad_x.row(r) = gx.transpose();
  }
  return grad_x;
}

}  // namespace detail

/// Batch objective L_i2t + L_t2i with fixed Gumbel noise.
///
/// Joint training compares quantized against continuous embeddings of the
/// other modality (z_img . x_txt^T against T, z_txt . x_img^T against T^T).
/// Without joint training both terms compare quantized embeddings
/// (z_img . z_txt^T and z_txt . z_img^T). When grads is non-null it must be
/// shaped like the model (see zeros_like); gradients are added into it.
inline double total_loss(const StudentModel& model, const Matrix& image_features,
                         const Matrix& text_features, const TargetMatrix& target,
                         const TrainConfig& config, const BatchNoise& noise,
                         StudentModel* grads = nullptr) {
  const Eigen::Index n = image_features.rows();
  if (text_features.rows() != n || target.values.rows() != n || target.values.cols() != n) {
    throw AlignmentError("total_loss: batch rows and target size disagree");
  }
  const PqgParams params = config.pqg();
  const auto img = detail::run_modality(model.image_head, model.codebooks, params, image_features, noise.image);
  const auto txt = detail::run_modality(model.text_head, model.codebooks, params, text_features, noise.text);
  const Matrix target_t = target.values.transpose();

  const Matrix& img_key = config.joint_training ? img.head.out : img.z;
  const Matrix& txt_key = config.joint_training ? txt.head.out : txt.z;

  Matrix g_img_z, g_txt_key, g_txt_z, g_img_key;
  Matrix* want_a = grads ? &g_img_z : nullptr;
  const double i2t = cross_modal_loss(img.z, txt_key, target.values, config.tau_ce, want_a,
                                      grads ? &g_txt_key : nullptr);
  const double t2i = cross_modal_loss(txt.z, img_key, target_t, config.tau_ce,
                                      grads ? &g_txt_z : nullptr, grads ? &g_img_key : nullptr);
  if (!grads) return i2t + t2i;

  Matrix& grad_words = grads->codebooks.words();
  if (config.joint_training) {
    Matrix g_img_x = detail::quantizer_backward(img, model.codebooks, params, g_img_z, grad_words);
    Matrix g_txt_x = detail::quantizer_backward(txt, model.codebooks, params, g_txt_z, grad_words);
    g_img_x += g_img_key;
    g_txt_x += g_txt_key;
    head_backward(model.image_head, img.head, g_img_x, grads->image_head);
    head_backward(model.text_head, txt.head, g_txt_x, grads->text_head);
  } else {
    g_img_z += g_img_key;
    g_txt_z += g_txt_key;
    const Matrix g_img_x = detail::quantizer_backward(img, model.codebooks, params, g_img_z, grad_words);
    const Matrix g_txt_x = detail::quantizer_backward(txt, model.codebooks, params, g_txt_z, grad_words);
    head_backward(model.image_head, img.head, g_img_x, grads->image_head);
    head_backward(model.text_head, txt.head, g_txt_x, grads->text_head);
  }
  return i2t + t2i;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

/// One Adam update over all tensors. Moments are created on first use.
inline void adam_step(const std::vector<std::span<double>>& params,
                      const std::vector<std::span<double>>& grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: tensor count mismatch");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), 0.0);
      state.second.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw ShapeError("adam_step: state does not match params");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].size() != grads[t].size() || state.first[t].size() != params[t].size()) {
      throw ShapeError("adam_step: tensor " + std::to_string(t) + " size mismatch");
    }
    auto& m = state.first[t];
    auto& v = state.second[t];
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double g = grads[t][i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      params[t][i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainingData {
  Matrix image_features;
  Matrix text_features;
  Matrix teacher_image;
  Matrix teacher_text;
  std::optional<MultiHotLabels> labels;
};

struct LossRecord {
  std::uint32_t epoch = 0;
  std::uint32_t batch = 0;
  double loss = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct TrainedModel {
  StudentModel student;
  TrainConfig config;
  std::vector<LossRecord> trace;

  /// Mean loss of each epoch in the trace.
  std::vector<double> epoch_means() const {
    std::vector<double> sums, counts;
    for (const LossRecord& r : trace) {
      if (r.epoch >= sums.size()) {
        sums.resize(r.epoch + 1, 0.0);
        counts.resize(r.epoch + 1, 0.0);
      }
      sums[r.epoch] += r.loss;
      counts[r.epoch] += 1.0;
    }
    for (std::size_t e = 0; e < sums.size(); ++e) sums[e] /= std::max(counts[e], 1.0);
    return sums;
  }

  friend bool operator==(const TrainedModel&, const TrainedModel&) = default;
};

/// Target for the rows `rows` of the training set under config.target.
inline TargetMatrix batch_target(const TrainingData& data, const std::vector<std::size_t>& rows,
                                 TargetMode mode) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  switch (mode) {
    case TargetMode::kIdentity: return target_identity(n);
    case TargetMode::kMultiHot: return target_multihot(data.labels->select_rows(rows));
    case TargetMode::kNpc:
    case TargetMode::kRaw: {
      Matrix ti(n, data.teacher_image.cols()), tt(n, data.teacher_text.cols());
      for (Eigen::Index r = 0; r < n; ++r) {
        ti.row(r) = data.teacher_image.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
        tt.row(r) = data.teacher_text.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
      }
      TargetMatrix sim = compute_similarity(ti, tt);
      return mode == TargetMode::kNpc ? npc(sim) : sim;
    }
  }
  throw ParameterError("batch_target: unknown mode");
}

inline void validate_training_data(const TrainingData& data, const TrainConfig& config) {
  const Eigen::Index n = data.image_features.rows();
  if (data.text_features.rows() != n || data.teacher_image.rows() != n ||
      data.teacher_text.rows() != n) {
    throw AlignmentError("training inputs have different row counts");
  }
  if (data.labels && static_cast<Eigen::Index>(data.labels->rows()) != n) {
    throw AlignmentError("label rows do not match training rows");
  }
  if (data.teacher_image.cols() != data.teacher_text.cols()) {
    throw ShapeError("teacher image and text dims differ");
  }
  if (config.target == TargetMode::kMultiHot && !data.labels) {
    throw ParameterError("target mode multihot requires labels");
  }
  require_finite(data.image_features, "image features");
  require_finite(data.text_features, "text features");
  require_finite(data.teacher_image, "teacher image embeddings");
  require_finite(data.teacher_text, "teacher text embeddings");
}

/// Mini-batch training. Random streams are split by purpose (initialization,
/// shuffling, Gumbel noise) so toggling one feature does not perturb the others.
/// A trailing batch with fewer than two rows is skipped.
inline TrainedModel train(const TrainConfig& config, const TrainingData& data) {
  config.validate();
  validate_training_data(data, config);
  SeededRng init_rng(derive_seed(config.seed, 0));
  SeededRng shuffle_rng(derive_seed(config.seed, 1));
  SeededRng noise_rng(derive_seed(config.seed, 2));

  TrainedModel result{init_student(config, static_cast<std::uint32_t>(data.image_features.cols()),
                                   static_cast<std::uint32_t>(data.text_features.cols()), init_rng),
                      config, {}};
  StudentModel& model = result.student;
  const auto n = static_cast<std::size_t>(data.image_features.rows());

  std::optional<TargetMatrix> global;
  if (config.global_targets && n > 0) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    global = batch_target(data, all, config.target);
  }

  const PqgParams params = config.pqg();
  const bool sample_noise = params.lambda > 0.0;
  AdamState adam;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    const double lr = epoch >= config.lr_drop_epoch ? config.lr * 0.1 : config.lr;
    std::uint32_t batch = 0;
    for (std::size_t start = 0; start + 1 < n; start += config.batch_size, ++batch) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto bn = static_cast<Eigen::Index>(rows.size());
      Matrix img(bn, data.image_features.cols()), txt(bn, data.text_features.cols());
      for (Eigen::Index r = 0; r < bn; ++r) {
        img.row(r) = data.image_features.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
        txt.row(r) = data.text_features.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]));
      }
      TargetMatrix target;
      if (global) {
        target.values.resize(bn, bn);
        target.normalized = global->normalized;
        for (Eigen::Index r = 0; r < bn; ++r) {
          for (Eigen::Index c = 0; c < bn; ++c) {
            target.values(r, c) = global->values(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]),
                                                 static_cast<Eigen::Index>(rows[static_cast<std::size_t>(c)]));
          }
        }
      } else {
        target = batch_target(data, rows, config.target);
      }
      const BatchNoise noise = sample_noise ? BatchNoise::sample(bn, model.codebooks, noise_rng)
                                            : BatchNoise::zeros(bn, model.codebooks);
      StudentModel grads = zeros_like(model);
      double loss;
      try {
        loss = total_loss(model, img, txt, target, config, noise, &grads);
      } catch (const NumericInputError&) {
        // Inputs were checked up front, so this is a non-finite activation.
        loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss", static_cast<int>(epoch), static_cast<int>(batch));
      result.trace.push_back({epoch, batch, loss});
      adam_step(parameter_spans(model), parameter_spans(grads), adam, lr);
    }
    for (const auto& p : parameter_spans(model)) {
      for (double v : p) {
        if (!std::isfinite(v)) {
          throw DivergenceError("non-finite parameter after epoch", static_cast<int>(epoch), static_cast<int>(batch));
        }
      }
    }
  }
  round_to_storage(model);
  return result;
}

/// l2-normalized embeddings of a feature matrix through one head.
inline Matrix encode(const MLPHead& head, const Matrix& features) { return forward(head, features); }

}  // namespace dcmq
