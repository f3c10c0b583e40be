#include "gmlfm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

namespace gmlfm::train {

using model::ModelParams;
using model::ParamGroup;

std::string_view to_string(Optimizer opt) { return opt == Optimizer::Sgd ? "sgd" : "adam"; }

std::optional<Optimizer> parse_optimizer(std::string_view name) {
  if (name == "sgd") return Optimizer::Sgd;
  if (name == "adam") return Optimizer::Adam;
  return std::nullopt;
}

void HyperParams::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("lr: learning rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch-size: must be >= 1");
  if (epochs < 0) throw std::invalid_argument("epochs: must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout: must be in [0, 1)");
  if (embed_dim < 1) throw std::invalid_argument("embed-dim: must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("adam-betas: must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam-eps: must be > 0");
  if (!(l2 >= 0.0)) throw std::invalid_argument("l2: must be >= 0");
  if (patience < 1) throw std::invalid_argument("patience: must be >= 1");
}

ModelParams init_params(std::size_t n, const model::DistanceSpec& spec, const HyperParams& hyper,
                        std::mt19937_64& rng) {
  ModelParams p = ModelParams::zeros(n, hyper.embed_dim, spec);
  std::normal_distribution<double> normal(0.0, 0.01);
  auto fill = [&](std::vector<double>& xs) {
    for (auto& x : xs) x = normal(rng);
  };
  fill(p.w);
  fill(p.V.data());
  fill(p.h);
  fill(p.L.data());
  for (auto& layer : p.mlp) {
    fill(layer.weight.data());
    fill(layer.bias);
  }
  p.w0 = 0.0;
  return p;
}

ModelGradient::ModelGradient(const ModelParams& like)
    : w(like.w.size(), 0.0),
      V(like.V.rows(), like.V.cols()),
      h(like.h.size(), 0.0),
      L(like.L.rows(), like.L.cols()),
      row_flag_(like.w.size(), 0) {
  for (const auto& layer : like.mlp)
    mlp.push_back({Matrix(layer.weight.rows(), layer.weight.cols()),
                   std::vector<double>(layer.bias.size(), 0.0)});
}

void ModelGradient::add(const tape::GradientMap& grads) {
  for (const auto& e : grads.entries()) {
    const auto group = static_cast<ParamGroup>(e.key.group);
    const auto idx = static_cast<std::size_t>(e.key.index);
    group_touched_[static_cast<int>(group)] = true;
    auto add_into = [&](std::span<double> dst) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += e.grad[i];
    };
    switch (group) {
      case ParamGroup::W0: w0 += e.grad[0]; break;
      case ParamGroup::W:
        w[idx] += e.grad[0];
        if (!row_flag_[idx]) {
          row_flag_[idx] = 1;
          rows_.push_back(static_cast<std::uint32_t>(idx));
        }
        break;
      case ParamGroup::V:
        add_into(V.row(idx));
        if (!row_flag_[idx]) {
          row_flag_[idx] = 1;
          rows_.push_back(static_cast<std::uint32_t>(idx));
        }
        break;
      case ParamGroup::H: add_into(h); break;
      case ParamGroup::L: add_into(L.data()); break;
      case ParamGroup::MlpW: add_into(mlp[idx].weight.data()); break;
      case ParamGroup::MlpB: add_into(mlp[idx].bias); break;
    }
  }
}

void ModelGradient::clear() {
  w0 = 0.0;
  for (auto r : rows_) {
    w[r] = 0.0;
    auto row = V.row(r);
    std::fill(row.begin(), row.end(), 0.0);
    row_flag_[r] = 0;
  }
  rows_.clear();
  std::fill(h.begin(), h.end(), 0.0);
  std::fill(L.data().begin(), L.data().end(), 0.0);
  for (auto& layer : mlp) {
    std::fill(layer.weight.data().begin(), layer.weight.data().end(), 0.0);
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
  }
  group_touched_.fill(false);
}

namespace {

/// Visits (gradient, parameter) coordinate pairs over touched tensors.
template <typename Grad, typename Params, typename Fn>
void for_each_touched(Grad& g, Params& p, const std::vector<std::uint32_t>& rows,
                      const std::array<bool, model::kNumParamGroups>& touched, Fn&& fn) {
  auto zip = [&](auto& a, auto& b) {
    for (std::size_t i = 0; i < a.size(); ++i) fn(a[i], b[i]);
  };
  if (touched[static_cast<int>(ParamGroup::W0)]) fn(g.w0, p.w0);
  for (auto r : rows) {
    fn(g.w[r], p.w[r]);
    auto gr = g.V.row(r);
    auto pr = p.V.row(r);
    zip(gr, pr);
  }
  if (touched[static_cast<int>(ParamGroup::H)]) zip(g.h, p.h);
  if (touched[static_cast<int>(ParamGroup::L)]) zip(g.L.data(), p.L.data());
  for (std::size_t l = 0; l < g.mlp.size(); ++l) {
    if (touched[static_cast<int>(ParamGroup::MlpW)]) zip(g.mlp[l].weight.data(), p.mlp[l].weight.data());
    if (touched[static_cast<int>(ParamGroup::MlpB)]) zip(g.mlp[l].bias, p.mlp[l].bias);
  }
}

}  // namespace

void ModelGradient::add_l2(const ModelParams& params, double l2) {
  if (l2 == 0.0) return;
  for_each_touched(*this, params, rows_, group_touched_,
                   [&](double& g, const double& theta) { g += l2 * theta; });
}

double ModelGradient::norm() const {
  double s = w0 * w0;
  for (auto r : rows_) {
    s += w[r] * w[r];
    for (double x : V.row(r)) s += x * x;
  }
  for (double x : h) s += x * x;
  for (double x : L.data()) s += x * x;
  for (const auto& layer : mlp) {
    for (double x : layer.weight.data()) s += x * x;
    for (double x : layer.bias) s += x * x;
  }
  return std::sqrt(s);
}

void ModelGradient::scale(double factor) {
  w0 *= factor;
  for (auto r : rows_) {
    w[r] *= factor;
    for (double& x : V.row(r)) x *= factor;
  }
  for (double& x : h) x *= factor;
  for (double& x : L.data()) x *= factor;
  for (auto& layer : mlp) {
    for (double& x : layer.weight.data()) x *= factor;
    for (double& x : layer.bias) x *= factor;
  }
}

void sgd_step(ModelParams& params, const ModelGradient& grad, double learning_rate) {
  std::array<bool, model::kNumParamGroups> touched{};
  for (int g = 0; g < model::kNumParamGroups; ++g) touched[g] = grad.touched(static_cast<ParamGroup>(g));
  for_each_touched(grad, params, grad.touched_rows(), touched,
                   [&](const double& g, double& theta) { theta -= learning_rate * g; });
}

AdamState make_adam_state(const ModelParams& params) {
  AdamState s;
  s.m = params;
  s.v = params;
  for (auto* p : {&s.m, &s.v}) {
    std::vector<double> zeros(model::flat_layout(*p).size, 0.0);
    model::unflatten(zeros, *p);
  }
  return s;
}

void adam_step(ModelParams& params, AdamState& state, const ModelGradient& grad,
               const HyperParams& hyper) {
  ++state.step;
  const double b1 = hyper.beta1;
  const double b2 = hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = hyper.learning_rate;
  const double eps = hyper.adam_eps;

  auto update = [&](double g, double& theta, double& m, double& v) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    theta -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
  };
  auto zip = [&](std::span<const double> g, std::span<double> p, std::span<double> m,
                 std::span<double> v) {
    for (std::size_t i = 0; i < g.size(); ++i) update(g[i], p[i], m[i], v[i]);
  };

  if (grad.touched(ParamGroup::W0)) update(grad.w0, params.w0, state.m.w0, state.v.w0);
  for (auto r : grad.touched_rows()) {
    update(grad.w[r], params.w[r], state.m.w[r], state.v.w[r]);
    zip(grad.V.row(r), params.V.row(r), state.m.V.row(r), state.v.V.row(r));
  }
  if (grad.touched(ParamGroup::H)) zip(grad.h, params.h, state.m.h, state.v.h);
  if (grad.touched(ParamGroup::L)) zip(grad.L.data(), params.L.data(), state.m.L.data(), state.v.L.data());
  for (std::size_t l = 0; l < params.mlp.size(); ++l) {
    if (grad.touched(ParamGroup::MlpW))
      zip(grad.mlp[l].weight.data(), params.mlp[l].weight.data(), state.m.mlp[l].weight.data(),
          state.v.mlp[l].weight.data());
    if (grad.touched(ParamGroup::MlpB))
      zip(grad.mlp[l].bias, params.mlp[l].bias, state.m.mlp[l].bias, state.v.mlp[l].bias);
  }
}

TrainState make_train_state(ModelParams params) {
  TrainState s;
  s.adam = make_adam_state(params);
  s.params = std::move(params);
  return s;
}

namespace {

/// Records loss = (yhat - y)^2 for one instance and returns its value.
double accumulate_instance(tape::Tape& t, ModelGradient& grad, const ModelParams& params,
                           const data::SparseInstance& inst, const model::DistanceSpec& spec,
                           const model::DropoutMasks* masks) {
  t.clear();
  const auto yhat = model::record_prediction(t, params, inst.entries, spec, masks);
  const auto loss = t.square(t.sub(yhat, t.constant(inst.label)));
  const double value = t.scalar(loss);
  if (!std::isfinite(value)) return value;
  grad.add(t.backward(loss));
  return value;
}

}  // namespace

ModelGradient batch_gradient(const ModelParams& params, std::span<const data::SparseInstance> batch,
                             const model::DistanceSpec& spec,
                             std::span<const model::DropoutMasks> masks) {
  ModelGradient grad(params);
  tape::Tape t;
  for (std::size_t i = 0; i < batch.size(); ++i)
    accumulate_instance(t, grad, params, batch[i], spec, masks.empty() ? nullptr : &masks[i]);
  return grad;
}

EpochResult train_epoch(TrainState& state, std::span<const data::SparseInstance> train,
                        const model::DistanceSpec& spec, const HyperParams& hyper,
                        std::mt19937_64& rng) {
  if (train.empty()) throw std::invalid_argument("train_epoch: empty training set");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  ModelGradient grad(state.params);
  tape::Tape t;
  const bool dropout = hyper.dropout > 0.0 && spec.layers >= 2;
  const std::size_t k = state.params.k();
  double total = 0.0;
  EpochResult result;

  for (std::size_t start = 0, batch = 0; start < order.size(); start += hyper.batch_size, ++batch) {
    const std::size_t end = std::min(order.size(), start + hyper.batch_size);
    grad.clear();
    for (std::size_t pos = start; pos < end; ++pos) {
      const auto& inst = train[order[pos]];
      model::DropoutMasks masks;
      if (dropout)
        masks = model::DropoutMasks::sample(inst.entries.size(), spec.layers, k, hyper.dropout, rng);
      const double loss = accumulate_instance(t, grad, state.params, inst, spec, &masks);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss in batch " + std::to_string(batch) + " at instance " +
                                std::to_string(order[pos]),
                            batch, order[pos]);
      total += loss;
    }
    grad.add_l2(state.params, hyper.l2);
    if (hyper.clip_norm > 0.0) {
      const double norm = grad.norm();
      if (norm > hyper.clip_norm) grad.scale(hyper.clip_norm / norm);
    }
    if (hyper.optimizer == Optimizer::Adam)
      adam_step(state.params, state.adam, grad, hyper);
    else
      sgd_step(state.params, grad, hyper.learning_rate);
    ++state.optimizer_steps;
    ++result.steps;
  }
  ++state.epoch;
  result.mean_loss = total / static_cast<double>(train.size());
  return result;
}

FitResult fit(std::span<const data::SparseInstance> train, std::size_t dimension,
              const model::DistanceSpec& spec, const HyperParams& hyper,
              const std::optional<Validation>& validation) {
  hyper.validate();
  std::mt19937_64 rng(hyper.seed);
  return fit_from(init_params(dimension, spec, hyper, rng), train, spec, hyper, validation);
}

FitResult fit_from(ModelParams initial, std::span<const data::SparseInstance> train,
                   const model::DistanceSpec& spec, const HyperParams& hyper,
                   const std::optional<Validation>& validation) {
  hyper.validate();
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  // Offset so the shuffle/dropout stream differs from the init stream.
  std::mt19937_64 rng(hyper.seed ^ 0x5bd1e995ULL);
  TrainState state = make_train_state(std::move(initial));
  FitResult result;
  result.params = state.params;

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const EpochResult er = train_epoch(state, train, spec, hyper, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = er.mean_loss;
    if (validation) {
      const double score = validation->score(state.params);
      rec.validation = score;
      const bool improved =
          !state.best_validation ||
          (validation->higher_is_better ? score > *state.best_validation
                                        : score < *state.best_validation);
      if (improved) {
        state.best_validation = score;
        state.epochs_since_improvement = 0;
        result.params = state.params;
        result.best_epoch = epoch;
      } else {
        ++state.epochs_since_improvement;
      }
    } else {
      result.params = state.params;
      result.best_epoch = epoch;
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (validation && state.epochs_since_improvement >= hyper.patience) break;
  }
  return result;
}

void write_history(std::ostream& out, const std::vector<EpochRecord>& history,
                   const std::string& metric, char d) {
  out << "epoch" << d << "train_loss" << d << "validation_" << metric << d << "wall_seconds\n";
  out.precision(17);
  for (const auto& r : history) {
    out << r.epoch << d << r.train_loss << d;
    if (r.validation)
      out << *r.validation;
    else
      out << "NA";
    out << d << r.wall_seconds << '\n';
  }
}

}  // namespace gmlfm::train
