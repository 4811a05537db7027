#pragma once

// Desk-scale low-rank adaptation: a frozen d x d weight plus a trainable
// rank-r product A*B, read out through a frozen V x d projection and a
// softmax. Used to check the training loss, its gradients and the update
// rule numerically.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "adaptrec/common.hpp"

namespace adaptrec::lora {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kProbabilityFloor = 1e-300;

class ShapeError : public Error {
public:
  using Error::Error;
};

class DivergenceError : public Error {
public:
  DivergenceError(std::size_t step, double loss)
      : Error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

private:
  std::size_t step_;
};

/// Frozen base weights plus trainable factors. The base is only reachable
/// through a const accessor.
class LowRankModel {
  Matrix frozen_;

public:
  LowRankModel(Matrix frozen, Matrix a, Matrix b) : frozen_(std::move(frozen)), a(std::move(a)), b(std::move(b)) {
    const auto d = frozen_.rows();
    if (frozen_.cols() != d) throw ShapeError("frozen weights must be square");
    if (this->a.rows() != d || this->b.cols() != d || this->a.cols() != this->b.rows())
      throw ShapeError("A must be d x r and B r x d");
    if (rank() < 1 || rank() >= dim()) throw ShapeError("rank must satisfy 1 <= r < d");
  }

  const Matrix& frozen() const { return frozen_; }
  Eigen::Index dim() const { return frozen_.rows(); }
  Eigen::Index rank() const { return a.cols(); }
  Matrix combined() const { return frozen_ + a * b; }
  std::size_t trainable_parameters() const { return static_cast<std::size_t>(a.size() + b.size()); }

  Matrix a;  // d x r
  Matrix b;  // r x d
};

struct Example {
  Vector x;
  std::size_t target = 0;  // 0-based class
};

struct ToyTask {
  Matrix projection;  // V x d read-out, frozen
  std::vector<Example> examples;

  std::size_t vocabulary() const { return static_cast<std::size_t>(projection.rows()); }

  void validate(Eigen::Index d) const {
    if (examples.empty()) throw Error("toy task has no examples");
    if (projection.cols() != d) throw ShapeError("projection must be V x d");
    for (const auto& e : examples) {
      if (e.x.size() != d) throw ShapeError("input dimension mismatch");
      if (e.target >= vocabulary()) throw Error("target class out of range");
    }
  }
};

inline Vector softmax(const Vector& logits) {
  const Vector shifted = (logits.array() - logits.maxCoeff()).exp().matrix();
  return shifted / shifted.sum();
}

inline Vector logits(const LowRankModel& m, const Matrix& projection, const Vector& x) {
  if (x.size() != m.dim() || projection.cols() != m.dim()) throw ShapeError("shape mismatch in forward pass");
  // (W + A B) x without forming A B.
  return projection * (m.frozen() * x + m.a * (m.b * x));
}

/// Class probabilities under the combined weights.
inline Vector lora_forward(const LowRankModel& m, const Matrix& projection, const Vector& x) {
  return softmax(logits(m, projection, x));
}

/// Summed negative log-likelihood of the targets.
inline double nll_loss(const LowRankModel& m, const ToyTask& task) {
  task.validate(m.dim());
  double loss = 0;
  for (const auto& e : task.examples) {
    const Vector p = lora_forward(m, task.projection, e.x);
    loss -= std::log(std::max(p(static_cast<Eigen::Index>(e.target)), kProbabilityFloor));
  }
  return loss;
}

struct Gradients {
  Matrix a;
  Matrix b;

  double norm() const { return std::sqrt(a.squaredNorm() + b.squaredNorm()); }
};

/// Analytic gradient of nll_loss with respect to A and B. With
/// g = P^T (p - onehot(y)): dA = g (B x)^T, dB = A^T g x^T.
inline Gradients grad(const LowRankModel& m, const ToyTask& task) {
  task.validate(m.dim());
  Gradients g{Matrix::Zero(m.a.rows(), m.a.cols()), Matrix::Zero(m.b.rows(), m.b.cols())};
  for (const auto& e : task.examples) {
    Vector dz = lora_forward(m, task.projection, e.x);
    dz(static_cast<Eigen::Index>(e.target)) -= 1.0;
    const Vector dh = task.projection.transpose() * dz;
    g.a.noalias() += dh * (m.b * e.x).transpose();
    g.b.noalias() += (m.a.transpose() * dh) * e.x.transpose();
  }
  return g;
}

/// p <- p - eta * g on A and B; the frozen weights are not touched.
inline void sgd_step(LowRankModel& m, const Gradients& g, double eta) {
  if (!(eta > 0)) throw Error("learning rate must be positive");
  if (g.a.rows() != m.a.rows() || g.a.cols() != m.a.cols() || g.b.rows() != m.b.rows() || g.b.cols() != m.b.cols())
    throw ShapeError("gradient shape mismatch");
  m.a -= eta * g.a;
  m.b -= eta * g.b;
}

struct TrainTrace {
  std::vector<double> loss;           // before the update at each step
  std::vector<double> grad_norm;
  std::vector<double> learning_rate;
  double final_loss = 0;              // after the last update
};

struct TrainResult {
  TrainTrace trace;
  LowRankModel model;
};

/// A ~ U(-init_scale, init_scale), B = 0, so step 0 reproduces the frozen model.
inline LowRankModel init_low_rank(const Matrix& frozen, Eigen::Index r, std::uint64_t seed, double init_scale = 0.1) {
  Rng rng(seed);
  Matrix a(frozen.rows(), r);
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = rng.uniform(-init_scale, init_scale);
  return LowRankModel(frozen, std::move(a), Matrix::Zero(r, frozen.cols()));
}

inline TrainResult train_toy(const ToyTask& task, const Matrix& frozen, Eigen::Index r, double eta,
                             std::size_t steps, std::uint64_t seed) {
  if (steps < 1) throw Error("train_toy: steps must be >= 1");
  TrainResult out{{}, init_low_rank(frozen, r, seed)};
  auto& tr = out.trace;
  for (std::size_t step = 0; step < steps; ++step) {
    const double loss = nll_loss(out.model, task);
    if (!std::isfinite(loss)) throw DivergenceError(step, loss);
    const Gradients g = grad(out.model, task);
    tr.loss.push_back(loss);
    tr.grad_norm.push_back(g.norm());
    tr.learning_rate.push_back(eta);
    sgd_step(out.model, g, eta);
  }
  tr.final_loss = nll_loss(out.model, task);
  if (!std::isfinite(tr.final_loss)) throw DivergenceError(steps, tr.final_loss);
  return out;
}

inline void write_trace_csv(std::ostream& out, const TrainTrace& tr) {
  out << "step,loss,grad_norm\n";
  out.precision(17);
  for (std::size_t i = 0; i < tr.loss.size(); ++i) out << i << "," << tr.loss[i] << "," << tr.grad_norm[i] << "\n";
}

/// Three well-separated classes in d=4 with a fixed identity-like read-out
/// and zero frozen weights; rank 2 suffices because softmax ignores the
/// shared logit offset.
inline std::pair<ToyTask, Matrix> separable_fixture() {
  ToyTask task;
  task.projection = Matrix::Zero(3, 4);
  task.projection(0, 0) = task.projection(1, 1) = task.projection(2, 2) = 1.0;
  for (std::size_t k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j) {
      Vector x = Vector::Zero(4);
      x(static_cast<Eigen::Index>(k)) = 1.0;
      x(3) = 0.1 * (j - 1.5);
      task.examples.push_back({x, k});
    }
  return {task, Matrix::Zero(4, 4)};
}

}  // namespace adaptrec::lora
