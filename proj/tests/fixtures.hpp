#pragma once

// Small shared setups for the unit and acceptance tests.

#include <vector>

#include "dcmq/dcmq.hpp"
#include "oracles.hpp"

namespace fixture {

/// N=4 rows, 6-dim features, D=8, M=2, K=4, one hidden layer of 5 per head.
inline dcmq::TrainConfig tiny_config(bool joint) {
  dcmq::TrainConfig c;
  c.books = 2;
  c.codewords = 4;
  c.dim = 8;
  c.image_hidden = {5};
  c.text_hidden = {5};
  c.joint_training = joint;
  return c;
}

struct TinyProblem {
  dcmq::TrainConfig config;
  dcmq::StudentModel model;
  dcmq::Matrix image;
  dcmq::Matrix text;
  dcmq::TargetMatrix target;
  dcmq::BatchNoise noise;
};

inline TinyProblem tiny_problem(bool joint, std::uint64_t seed = 3) {
  dcmq::SeededRng rng(seed);
  TinyProblem p{tiny_config(joint), {}, dcmq::Matrix(4, 6), dcmq::Matrix(4, 6), {}, {}};
  p.model = dcmq::init_student(p.config, 6, 6, rng);
  // Non-zero biases so their gradients are exercised away from the init point.
  for (dcmq::MLPHead* h : {&p.model.image_head, &p.model.text_head}) {
    for (auto& b : h->biases) {
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = 0.1 * rng.normal();
    }
  }
  for (Eigen::Index i = 0; i < p.image.size(); ++i) p.image.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < p.text.size(); ++i) p.text.data()[i] = rng.normal();
  dcmq::Matrix ti(4, 10), tt(4, 10);
  for (Eigen::Index i = 0; i < ti.size(); ++i) ti.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < tt.size(); ++i) tt.data()[i] = rng.normal() + ti.data()[i];
  p.target = dcmq::npc(dcmq::compute_similarity(ti, tt));
  p.noise = dcmq::BatchNoise::sample(4, p.model.codebooks, rng);
  return p;
}

/// Norm-wise relative error between the analytic gradient of total_loss and
/// central finite differences, over every parameter at once.
inline double tiny_gradient_error(bool joint, double lambda = 1.0) {
  TinyProblem p = tiny_problem(joint);
  p.config.lambda = lambda;
  dcmq::StudentModel grads = dcmq::zeros_like(p.model);
  dcmq::total_loss(p.model, p.image, p.text, p.target, p.config, p.noise, &grads);

  auto loss = [&] { return dcmq::total_loss(p.model, p.image, p.text, p.target, p.config, p.noise); };
  std::vector<double> analytic, numeric;
  const auto params = dcmq::parameter_spans(p.model);
  const auto g = dcmq::parameter_spans(grads);
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto fd = oracle::finite_difference(params[t], loss, 1e-5);
    numeric.insert(numeric.end(), fd.begin(), fd.end());
    analytic.insert(analytic.end(), g[t].begin(), g[t].end());
  }
  return oracle::relative_error(analytic, numeric);
}

}  // namespace fixture
