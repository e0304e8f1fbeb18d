#include "tense/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>

#include "tense/parallel.hpp"

namespace tense {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kDataStream = 2;
constexpr std::uint64_t kEvalStream = 3;

std::map<std::string, Tensor, std::less<>> collect_grads(const Evaluation& ev, NodeId loss,
                                                         const ModelNodes& nodes) {
  std::vector<NodeId> ids;
  std::vector<std::string> names;
  for (const auto& [name, id] : nodes.params) {
    if (name.ends_with(".bn.running_mean") || name.ends_with(".bn.running_var")) continue;
    ids.push_back(id);
    names.push_back(name);
  }
  auto g = ev.backward(loss, ids);
  std::map<std::string, Tensor, std::less<>> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(names[i], std::move(g.values[i]));
  return out;
}

/// Graph of the toy loss for a fixed batch size.
struct ToyGraph {
  Graph g;
  ModelNodes nodes;
  NodeId loss;

  ToyGraph(const Model& model, const ToyTask& task, std::size_t batch) {
    const NodeId x = g.input("x");
    const NodeId t = g.input("t");
    nodes = append_model(g, x, model, ParamBinding::Placeholders);
    const auto imp = task.importances();
    Tensor w(Shape{batch, task.features});
    for (std::size_t b = 0; b < batch; ++b)
      std::copy(imp.begin(), imp.end(), w.data().begin() + static_cast<std::ptrdiff_t>(b * imp.size()));
    const NodeId d = g.sub(nodes.output, t);
    const NodeId weighted = g.mul(g.mul(d, d), g.constant(std::move(w), "importance"));
    loss = g.scale(g.sum(weighted), 1.0 / static_cast<double>(batch));
  }
};

}  // namespace

void Adam::step(ParamMap& params, const std::map<std::string, Tensor, std::less<>>& grads,
                double lr_scale) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const double lr = config_.lr * lr_scale;
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw InvalidArgument("gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * gi * gi;
      p[i] = static_cast<float>(p[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps));
    }
  }
}

ToyTask ToyTask::abs() { return ToyTask{}; }

ToyTask ToyTask::xor_task() {
  ToyTask t;
  t.kind = ToyKind::Xor;
  t.sparsity = 0.95;
  return t;
}

double ToyTask::importance(std::size_t i) const { return std::pow(0.9, static_cast<double>(i)); }

std::vector<float> ToyTask::importances() const {
  std::vector<float> w(features);
  for (std::size_t i = 0; i < features; ++i) w[i] = static_cast<float>(importance(i));
  return w;
}

std::vector<float> ToyTask::target(std::span<const float> x) const {
  std::vector<float> f(features);
  for (std::size_t i = 0; i < features; ++i)
    f[i] = kind == ToyKind::Abs ? std::abs(x[i])
                                : static_cast<float>((x[2 * i] > 0.5f) != (x[2 * i + 1] > 0.5f));
  return f;
}

std::string to_string(ToyKind kind) { return kind == ToyKind::Abs ? "abs" : "xor"; }

ToyKind parse_toy_kind(std::string_view s) {
  if (s == "abs") return ToyKind::Abs;
  if (s == "xor") return ToyKind::Xor;
  throw InvalidArgument("unknown toy task '" + std::string(s) + "' (expected abs or xor)");
}

ToyBatch sample_toy_batch(const ToyTask& task, std::size_t batch, Rng& rng) {
  if (batch == 0) throw InvalidArgument("batch must be positive");
  const std::size_t d = task.input_dim(), n = task.features;
  ToyBatch out{Tensor(Shape{batch, d}), Tensor(Shape{batch, n})};
  for (std::size_t b = 0; b < batch; ++b) {
    auto x = out.inputs.data().subspan(b * d, d);
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.uniform() < task.sparsity) continue;
      if (task.kind == ToyKind::Abs) {
        x[i] = static_cast<float>(rng.uniform(task.range_lo, task.range_hi));
      } else {
        x[2 * i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
        x[2 * i + 1] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      }
    }
    const auto f = task.target(x);
    std::copy(f.begin(), f.end(), out.targets.data().begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return out;
}

double toy_loss(const Tensor& pred, const Tensor& target, std::span<const float> importances) {
  if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != importances.size())
    throw ShapeError("toy_loss: pred " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  const std::size_t B = pred.dim(0), F = pred.dim(1);
  double total = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < F; ++i) {
      const double d = static_cast<double>(pred[b * F + i]) - target[b * F + i];
      total += importances[i] * d * d;
    }
  return total / static_cast<double>(B);
}

Model toy_model(const ToyTask& task, std::size_t hidden, std::uint64_t seed, bool bias) {
  if (hidden == 0) throw InvalidArgument("hidden width must be at least 1");
  Model m = build_model(toy_spec(task.input_dim(), hidden, task.features, bias),
                        derive_seed(seed, kInitStream));
  m.metadata["task"] = to_string(task.kind);
  m.metadata["hidden"] = std::to_string(hidden);
  m.metadata["sparsity"] = std::to_string(task.sparsity);
  m.metadata["train_seed"] = std::to_string(seed);
  m.metadata["features"] = std::to_string(task.features);
  if (task.kind == ToyKind::Abs) {
    m.metadata["range_lo"] = std::to_string(task.range_lo);
    m.metadata["range_hi"] = std::to_string(task.range_hi);
  }
  return m;
}

ToyTask toy_task_from_metadata(const Model& model) {
  const auto get = [&](std::string_view key) -> std::optional<std::string> {
    auto it = model.metadata.find(key);
    if (it == model.metadata.end()) return std::nullopt;
    return it->second;
  };
  const auto kind = get("task");
  if (!kind || (*kind != "abs" && *kind != "xor"))
    throw InvalidArgument("checkpoint metadata does not name a toy task");
  ToyTask task = parse_toy_kind(*kind) == ToyKind::Abs ? ToyTask::abs() : ToyTask::xor_task();
  if (auto v = get("features")) task.features = std::stoul(*v);
  if (auto v = get("sparsity")) task.sparsity = std::stod(*v);
  if (auto v = get("range_lo")) task.range_lo = std::stod(*v);
  if (auto v = get("range_hi")) task.range_hi = std::stod(*v);
  return task;
}

double toy_eval_loss(const Model& model, const ToyTask& task, std::uint64_t seed,
                     std::size_t batch, std::size_t batches) {
  Rng rng(derive_seed(seed, kEvalStream));
  const auto imp = task.importances();
  double total = 0;
  for (std::size_t k = 0; k < batches; ++k) {
    const ToyBatch b = sample_toy_batch(task, batch, rng);
    total += toy_loss(predict(model, b.inputs, batch), b.targets, imp);
  }
  return total / static_cast<double>(std::max<std::size_t>(batches, 1));
}

SeedResult train_toy_seed(const ToyTask& task, std::size_t hidden, const TrainConfig& config,
                          std::uint64_t seed, Model* out_model) {
  Model model = toy_model(task, hidden, seed, config.bias);
  ToyGraph tg(model, task, config.batch);
  Adam adam(config.adam);
  Rng rng(derive_seed(seed, kDataStream));
  SeedResult res;
  res.seed = seed;
  TensorMap inputs;
  for (std::size_t it = 1; it <= config.iterations; ++it) {
    ToyBatch b = sample_toy_batch(task, config.batch, rng);
    inputs.insert_or_assign("x", std::move(b.inputs));
    inputs.insert_or_assign("t", std::move(b.targets));
    bind_params(model, inputs);
    const Evaluation ev = tg.g.evaluate(inputs);
    const double loss = ev.value(tg.loss).item();
    if (!std::isfinite(loss))
      throw NonFiniteError("seed " + std::to_string(seed) + " iteration " + std::to_string(it));
    adam.step(model.params, collect_grads(ev, tg.loss, tg.nodes));
    if (config.log_every && (it % config.log_every == 0 || it == config.iterations))
      res.log.push_back({seed, it, loss});
  }
  res.final_loss = toy_eval_loss(model, task, seed, config.batch, config.eval_batches);
  if (!std::isfinite(res.final_loss))
    throw NonFiniteError("seed " + std::to_string(seed) + " final loss");
  model.metadata["final_loss"] = std::to_string(res.final_loss);
  if (out_model) *out_model = std::move(model);
  return res;
}

ToyTrainResult train_toy(const ToyTask& task, std::size_t hidden, const TrainConfig& config) {
  if (config.seeds == 0) throw InvalidArgument("seed count must be positive");
  std::vector<SeedResult> results(config.seeds);
  std::vector<Model> models(config.seeds);
  parallel_for(config.seeds, [&](std::size_t k) {
    const std::uint64_t seed = config.base_seed + k;
    try {
      results[k] = train_toy_seed(task, hidden, config, seed, &models[k]);
    } catch (const NonFiniteError&) {
      results[k].seed = seed;
      results[k].finite = false;
      results[k].final_loss = std::numeric_limits<double>::quiet_NaN();
    }
  });
  ToyTrainResult out;
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < results.size(); ++k) {
    if (!results[k].finite) {
      ++out.discarded;
      continue;
    }
    if (!best || results[k].final_loss < results[*best].final_loss) best = k;
  }
  if (!best) throw NonFiniteError("every seed diverged");
  out.best = std::move(models[*best]);
  out.best_seed = results[*best].seed;
  out.best_loss = results[*best].final_loss;
  out.seeds = std::move(results);
  return out;
}

Tensor exhaustive_inputs(const ToyTask& task) {
  const std::size_t d = task.input_dim();
  const std::size_t base = task.kind == ToyKind::Abs ? 3 : 2;
  std::size_t count = 1;
  for (std::size_t i = 0; i < d; ++i) count *= base;
  Tensor x(Shape{count, d});
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t r = k;
    for (std::size_t i = 0; i < d; ++i) {
      const std::size_t digit = r % base;
      r /= base;
      x[k * d + i] = task.kind == ToyKind::Abs ? static_cast<float>(digit) - 1.0f
                                               : static_cast<float>(digit);
    }
  }
  return x;
}

std::map<std::size_t, double> ExhaustiveEval::bucket_mean() const {
  std::map<std::size_t, double> out;
  for (const auto& [k, v] : buckets)
    out[k] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return out;
}

ExhaustiveEval eval_exhaustive(const Model& model, const ToyTask& task) {
  const Tensor x = exhaustive_inputs(task);
  const Tensor y = predict(model, x, 1024);
  const std::size_t N = x.dim(0), d = x.dim(1), F = task.features;
  ExhaustiveEval ev;
  ev.losses.resize(N);
  ev.active.resize(N);
  double total = 0;
  for (std::size_t k = 0; k < N; ++k) {
    const auto f = task.target(x.data().subspan(k * d, d));
    double loss = 0;
    std::size_t active = 0;
    for (std::size_t i = 0; i < F; ++i) {
      const double diff = static_cast<double>(y[k * F + i]) - f[i];
      loss += task.importance(i) * diff * diff;
      active += f[i] != 0.0f;
    }
    ev.losses[k] = loss;
    ev.active[k] = active;
    ev.buckets[active].push_back(loss);
    total += loss;
    ev.max = std::max(ev.max, loss);
  }
  ev.mean = total / static_cast<double>(N);
  return ev;
}

Tensor predict(const Model& model, const Tensor& inputs, std::size_t chunk) {
  const Tensor x = as_batch(model, inputs);
  Graph g;
  const NodeId in = g.input("x");
  const ModelNodes nodes = append_model(g, in, model, ParamBinding::Constants);
  const std::size_t N = x.dim(0);
  std::vector<float> out;
  Shape out_shape;
  for (std::size_t s = 0; s < N; s += chunk) {
    const std::size_t e = std::min(N, s + chunk);
    std::vector<std::size_t> ids(e - s);
    std::iota(ids.begin(), ids.end(), s);
    const auto ev = g.evaluate(TensorMap{{"x", s == 0 && e == N ? x : gather_rows(x, ids)}});
    const Tensor& y = ev.value(nodes.output);
    if (out_shape.empty()) out_shape = y.shape();
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  out_shape[0] = N;
  return Tensor(std::move(out_shape), std::move(out));
}

double classify_accuracy(const Model& model, const Tensor& images, const std::vector<int>& labels,
                         std::vector<std::vector<std::size_t>>* confusion,
                         std::vector<std::vector<double>>* mean_logits) {
  const Tensor logits = predict(model, images);
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw ShapeError("label count does not match image count");
  std::vector<std::vector<std::size_t>> conf(K, std::vector<std::size_t>(K, 0));
  std::vector<std::vector<double>> means(K, std::vector<double>(K, 0.0));
  std::vector<std::size_t> per_class(K, 0);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const auto row = logits.data().subspan(n * K, K);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const auto truth = static_cast<std::size_t>(labels[n]);
    if (truth >= K) throw InvalidArgument("label " + std::to_string(labels[n]) + " out of range");
    correct += pred == truth;
    ++conf[truth][pred];
    ++per_class[truth];
    for (std::size_t k = 0; k < K; ++k) means[truth][k] += row[k];
  }
  for (std::size_t t = 0; t < K; ++t)
    for (auto& v : means[t]) v /= static_cast<double>(std::max<std::size_t>(per_class[t], 1));
  if (confusion) *confusion = std::move(conf);
  if (mean_logits) *mean_logits = std::move(means);
  return N ? static_cast<double>(correct) / static_cast<double>(N) : 0.0;
}

ConvnetResult train_convnet(const Tensor& images, const std::vector<int>& labels,
                            const ModelSpec& spec, const ConvnetConfig& config) {
  if (images.rank() < 2 || images.dim(0) != labels.size() || labels.empty())
    throw InvalidArgument("train_convnet needs one label per image");
  Model model = build_model(spec, derive_seed(config.seed, kInitStream));
  const std::size_t K = model.stages.back().shape[0];
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      throw InvalidArgument("label " + std::to_string(l) + " outside the " + std::to_string(K) +
                            " output units");

  Rng rng(derive_seed(config.seed, kDataStream));
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_hold = static_cast<std::size_t>(std::round(config.holdout * static_cast<double>(order.size())));
  std::vector<std::size_t> hold(order.end() - static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
  if (train.empty()) throw InvalidArgument("no training examples left after the holdout split");
  const Tensor hold_x = gather_rows(images, hold);
  std::vector<int> hold_y;
  for (auto i : hold) hold_y.push_back(labels[i]);

  Graph g;
  const NodeId x = g.input("x");
  const NodeId t = g.input("t");
  const ModelNodes nodes =
      append_model(g, x, model, ParamBinding::Placeholders, BatchNormMode::Training);
  const NodeId loss = g.softmax_cross_entropy(nodes.output, t);
  Adam adam(config.adam);

  ConvnetResult res;
  TensorMap inputs;
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = train.size(); i > 1; --i) std::swap(train[i - 1], train[rng.below(i)]);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < train.size(); s += config.batch) {
      const std::size_t e = std::min(train.size(), s + config.batch);
      std::span<const std::size_t> ids(train.data() + s, e - s);
      Tensor onehot(Shape{ids.size(), K});
      for (std::size_t k = 0; k < ids.size(); ++k)
        onehot[k * K + static_cast<std::size_t>(labels[ids[k]])] = 1.0f;
      inputs.insert_or_assign("x", gather_rows(images, ids));
      inputs.insert_or_assign("t", std::move(onehot));
      bind_params(model, inputs);
      ++iteration;
      const auto fail = [&] {
        return NonFiniteError("training diverged at seed " + std::to_string(config.seed) +
                              " iteration " + std::to_string(iteration));
      };
      std::optional<Evaluation> ev;
      try {
        ev.emplace(g.evaluate(inputs));
      } catch (const NonFiniteError&) {
        throw fail();
      }
      const double l = ev->value(loss).item();
      if (!std::isfinite(l)) throw fail();
      adam.step(model.params, collect_grads(*ev, loss, nodes));
      for (const auto& [stage, id] : nodes.batch_norm) {
        const BatchStats* st = ev->batch_stats(id);
        Tensor& rm = model.params.at(stage + ".bn.running_mean");
        Tensor& rv = model.params.at(stage + ".bn.running_var");
        const double mo = config.bn_momentum;
        for (std::size_t c = 0; c < rm.size(); ++c) {
          rm[c] = static_cast<float>(mo * rm[c] + (1 - mo) * st->mean[c]);
          rv[c] = static_cast<float>(mo * rv[c] + (1 - mo) * st->var[c]);
        }
      }
      total += l;
      ++batches;
    }
    ConvnetEpoch rec{epoch, total / static_cast<double>(batches), 0.0};
    rec.holdout_accuracy = hold.empty() ? 0.0 : classify_accuracy(model, hold_x, hold_y);
    res.log.push_back(rec);
  }
  if (!hold.empty())
    res.holdout_accuracy = classify_accuracy(model, hold_x, hold_y, &res.confusion, &res.mean_logits);
  model.metadata["task"] = "convnet";
  model.metadata["holdout_accuracy"] = std::to_string(res.holdout_accuracy);
  model.metadata["train_seed"] = std::to_string(config.seed);
  res.model = std::move(model);
  return res;
}

}  // namespace tense
