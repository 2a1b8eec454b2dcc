#pragma once

// Training recipes, optimizers, the training loop, checkpoints and loss
// history.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/metrics.hpp"

namespace mmfuse {

inline bool deterministic_mode() {
  const char* v = std::getenv("MMFUSE_DETERMINISTIC");
  return v && std::string(v) == "1";
}

// ----------------------------------------------------------------- recipes

enum class Stage { cnn_base, text_base, late, intermediate, early };

NLOHMANN_JSON_SERIALIZE_ENUM(Stage, {{Stage::cnn_base, "cnn_base"},
                                     {Stage::text_base, "text_base"},
                                     {Stage::late, "late"},
                                     {Stage::intermediate, "intermediate"},
                                     {Stage::early, "early"}})

inline std::string to_string(Stage s) { return nlohmann::json(s).get<std::string>(); }

inline Stage parse_stage(const std::string& name) {
  for (auto s : {Stage::cnn_base, Stage::text_base, Stage::late, Stage::intermediate, Stage::early})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown stage '" + name + "' (expected cnn_base, text_base, late, intermediate or early)");
}

/// The model a stage trains. Base stages train one backbone with the shared head.
inline Strategy strategy_for(Stage s) {
  switch (s) {
    case Stage::cnn_base: return Strategy::vision_only;
    case Stage::text_base: return Strategy::text_only;
    case Stage::late: return Strategy::late;
    case Stage::intermediate: return Strategy::intermediate;
    case Stage::early: return Strategy::early;
  }
  throw ConfigError("unreachable stage");
}

enum class OptimizerKind { sgd_momentum, adam };

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::sgd_momentum, "sgd_momentum"}, {OptimizerKind::adam, "adam"}})

struct TrainRecipe {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::set<std::string> freeze;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("recipe: lr must be finite and >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("recipe: weight_decay must be >= 0");
    if (epochs == 0) throw ConfigError("recipe: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("recipe: batch_size must be >= 1");
    if (optimizer == OptimizerKind::adam && !(epsilon > 0.0)) throw ConfigError("recipe: adam epsilon must be > 0");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainRecipe, optimizer, lr, momentum, beta1, beta2, epsilon,
                                                weight_decay, epochs, batch_size, freeze, seed)

enum class Scale { full, toy };

NLOHMANN_JSON_SERIALIZE_ENUM(Scale, {{Scale::full, "full"}, {Scale::toy, "toy"}})

/// Reference recipes. Scale::toy keeps the optimizer family, momentum,
/// betas, epsilon, weight decay and batch size, but uses larger learning
/// rates and fewer epochs so randomly initialised toy models train in minutes.
inline TrainRecipe recipe_for(Stage stage, Scale scale = Scale::full) {
  TrainRecipe r;
  r.batch_size = 32;
  r.weight_decay = 1e-4;
  r.momentum = 0.9;
  switch (stage) {
    case Stage::cnn_base:
      r.optimizer = OptimizerKind::sgd_momentum;
      r.lr = 1e-4;
      r.epochs = 150;
      break;
    case Stage::text_base:
      r.optimizer = OptimizerKind::adam;
      r.lr = 1e-5;
      r.beta1 = 0.9;
      r.beta2 = 0.999;
      r.epsilon = 1e-8;
      r.weight_decay = 0.0;
      r.epochs = 12;
      break;
    case Stage::late:
      r.optimizer = OptimizerKind::sgd_momentum;
      r.lr = 1e-3;
      r.epochs = 100;
      r.freeze = {"text", "vision"};
      break;
    case Stage::intermediate:
    case Stage::early:
      r.optimizer = OptimizerKind::sgd_momentum;
      r.lr = 1e-4;
      r.epochs = 100;
      break;
  }
  if (scale == Scale::toy) {
    switch (stage) {
      case Stage::cnn_base: r.lr = 5e-2; r.epochs = 12; break;
      case Stage::text_base: r.lr = 1e-4; r.epochs = 10; break;
      case Stage::late: r.lr = 5e-2; r.epochs = 60; break;
      case Stage::intermediate:
      case Stage::early: r.lr = 5e-3; r.epochs = 12; break;
    }
  }
  return r;
}

// -------------------------------------------------------------- optimizers

/// SGD with momentum (v = mu*v + g', p -= lr*v) or Adam, both with weight
/// decay folded into the gradient: g' = g + wd*p. State exists only for
/// parameters that currently require gradients.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const TrainRecipe& r) : recipe_(r) { r.validate(); }

  void step(const ParamRegistry<T>& reg) {
    ++steps_;
    std::set<std::string> live;
    for (const auto& p : reg.params()) {
      if (!p.var.requires_grad()) continue;
      live.insert(p.name);
      Var<T> v = p.var;
      auto& w = v.mutable_value();
      const bool has = v.has_grad();
      auto& slots = state_[p.name];
      if (slots.empty()) slots.assign(recipe_.optimizer == OptimizerKind::adam ? 2 : 1, Tensor<T>(w.shape()));
      const T lr = static_cast<T>(recipe_.lr), wd = static_cast<T>(recipe_.weight_decay);
      if (recipe_.optimizer == OptimizerKind::sgd_momentum) {
        const T mu = static_cast<T>(recipe_.momentum);
        auto& vel = slots[0];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const T g = (has ? v.grad()[i] : T(0)) + wd * w[i];
          vel[i] = mu * vel[i] + g;
          w[i] -= lr * vel[i];
        }
      } else {
        const double b1 = recipe_.beta1, b2 = recipe_.beta2;
        const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(steps_)));
        const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(steps_)));
        const T eps = static_cast<T>(recipe_.epsilon);
        auto &m = slots[0], &s = slots[1];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const T g = (has ? v.grad()[i] : T(0)) + wd * w[i];
          m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1 - b1) * g;
          s[i] = static_cast<T>(b2) * s[i] + static_cast<T>(1 - b2) * g * g;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(s[i] / c2) + eps);
        }
      }
    }
    for (auto it = state_.begin(); it != state_.end();)
      it = live.contains(it->first) ? std::next(it) : state_.erase(it);
  }

  /// Scalars held as optimizer state.
  std::size_t state_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, slots] : state_)
      for (const auto& t : slots) n += t.size();
    return n;
  }

  std::size_t steps() const { return steps_; }
  const std::map<std::string, std::vector<Tensor<T>>>& state() const { return state_; }
  std::map<std::string, std::vector<Tensor<T>>>& mutable_state() { return state_; }
  void set_steps(std::size_t s) { steps_ = s; }

 private:
  TrainRecipe recipe_;
  std::size_t steps_ = 0;
  std::map<std::string, std::vector<Tensor<T>>> state_;
};

template <typename T>
void zero_grads(const ParamRegistry<T>& reg) {
  for (const auto& p : reg.params()) {
    Var<T> v = p.var;
    v.zero_grad();
  }
}

// ---------------------------------------------------------- freeze control

template <typename T>
void freeze(FusedModel<T>& model, const std::set<std::string>& groups) {
  model.freeze(groups);
}

template <typename T>
void unfreeze(FusedModel<T>& model, const std::set<std::string>& groups) {
  model.unfreeze(groups);
}

// ------------------------------------------------------------- checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_string(std::ostream& o, const std::string& s) {
  put(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 26)) throw FormatError("checkpoint corrupt: string length " + std::to_string(n));
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(s.size()));
  if (!in) throw FormatError("checkpoint truncated");
  return s;
}
template <typename T>
void put_tensor(std::ostream& o, const std::string& name, const Tensor<T>& t) {
  put_string(o, name);
  put(o, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put(o, static_cast<std::uint64_t>(d));
  o.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}
template <typename T>
std::pair<std::string, Tensor<T>> get_tensor(std::istream& in) {
  auto name = get_string(in);
  const auto rank = get<std::uint32_t>(in);
  if (rank > 8) throw FormatError("checkpoint corrupt: rank " + std::to_string(rank) + " in " + name);
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    d = get<std::uint64_t>(in);
    total *= d;
    if (d > (1ULL << 32) || total > (1ULL << 32)) throw FormatError("checkpoint corrupt: shape of " + name);
  }
  Tensor<T> t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!in) throw FormatError("checkpoint truncated in " + name);
  return {std::move(name), std::move(t)};
}
}  // namespace detail

/// Container: magic "MMCK", version, JSON header (model config, its hash,
/// frozen groups, caller metadata), scalar width, parameters, buffers,
/// optimizer slots.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, FusedModel<T>& model, const Optimizer<T>* opt = nullptr,
                     nlohmann::json meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["config"] = model.config_json();
  header["config_hash"] = model.hash();
  header["frozen"] = model.frozen_groups();
  header["meta"] = std::move(meta);
  header["optimizer_steps"] = opt ? opt->steps() : 0;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary);
    if (!o) throw ValidationError("cannot write checkpoint " + path.string());
    o.write("MMCK", 4);
    detail::put(o, kCheckpointVersion);
    detail::put_string(o, header.dump());
    detail::put(o, static_cast<std::uint32_t>(sizeof(T)));
    auto reg = model.registry();
    detail::put(o, static_cast<std::uint64_t>(reg.params().size()));
    for (const auto& p : reg.params()) detail::put_tensor(o, p.name, p.var.value());
    detail::put(o, static_cast<std::uint64_t>(reg.buffers().size()));
    for (const auto& b : reg.buffers()) detail::put_tensor(o, b.name, *b.tensor);
    std::uint64_t slots = 0;
    if (opt)
      for (const auto& [name, s] : opt->state()) slots += s.size();
    detail::put(o, slots);
    if (opt)
      for (const auto& [name, s] : opt->state())
        for (std::size_t k = 0; k < s.size(); ++k) detail::put_tensor(o, name + "#" + std::to_string(k), s[k]);
    if (!o) throw ValidationError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
struct CheckpointData {
  nlohmann::json header;
  std::map<std::string, Tensor<T>> params, buffers, optimizer;
};

template <typename T>
CheckpointData<T> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint not found: " + path.string() + " (run `mmfuse train` first)");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MMCK") throw FormatError(path.string() + ": not a checkpoint");
  if (detail::get<std::uint32_t>(in) != kCheckpointVersion) throw FormatError(path.string() + ": unsupported checkpoint version");
  CheckpointData<T> d;
  try {
    d.header = nlohmann::json::parse(detail::get_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt header (" + e.what() + ")");
  }
  if (config_hash(d.header.at("config")) != d.header.at("config_hash").template get<std::string>())
    throw FormatError(path.string() + ": config hash mismatch");
  if (detail::get<std::uint32_t>(in) != sizeof(T)) throw FormatError(path.string() + ": scalar width differs from reader");
  for (auto* table : {&d.params, &d.buffers, &d.optimizer}) {
    const auto n = detail::get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < n; ++i) table->insert(detail::get_tensor<T>(in));
  }
  return d;
}

/// Copies checkpoint parameters and buffers into `model`. With `groups` set,
/// only those parameter groups are loaded; every matching model entry must
/// be present with the same shape.
template <typename T>
void load_state(FusedModel<T>& model, const CheckpointData<T>& d, const std::set<std::string>& groups = {}) {
  auto reg = model.registry();
  auto wanted = [&](const std::string& name) { return groups.empty() || groups.contains(ParamRegistry<T>::group_of(name)); };
  for (const auto& p : reg.params()) {
    if (!wanted(p.name)) continue;
    auto it = d.params.find(p.name);
    if (it == d.params.end()) throw FormatError("checkpoint lacks parameter " + p.name);
    if (it->second.shape() != p.var.shape())
      throw FormatError("parameter " + p.name + ": checkpoint shape " + shape_str(it->second.shape()) + " vs model " +
                        shape_str(p.var.shape()));
    Var<T> v = p.var;
    v.mutable_value() = it->second;
  }
  for (const auto& b : reg.buffers()) {
    if (!wanted(b.name)) continue;
    auto it = d.buffers.find(b.name);
    if (it == d.buffers.end()) throw FormatError("checkpoint lacks buffer " + b.name);
    *b.tensor = it->second;
  }
}

template <typename T>
struct LoadedModel {
  std::unique_ptr<FusedModel<T>> model;
  nlohmann::json header;
};

/// Rebuilds the model from the embedded config and restores its state.
template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path, Optimizer<T>* opt = nullptr) {
  auto d = read_checkpoint<T>(path);
  auto cfg = d.header.at("config").template get<ModelConfig>();
  auto model = build_model<T>(cfg);
  model->unfreeze(std::set<std::string>(model->frozen_groups()));
  model->freeze(d.header.at("frozen").template get<std::set<std::string>>());
  load_state(*model, d);
  if (opt) {
    auto& st = opt->mutable_state();
    st.clear();
    for (auto& [key, t] : d.optimizer) {
      const auto hash = key.rfind('#');
      const auto name = key.substr(0, hash);
      const auto slot = std::stoul(key.substr(hash + 1));
      auto& slots = st[name];
      if (slots.size() <= slot) slots.resize(slot + 1);
      slots[slot] = t;
    }
    opt->set_steps(d.header.value("optimizer_steps", std::size_t{0}));
  }
  return {std::move(model), d.header};
}

// ------------------------------------------------------------ predictions

template <typename T>
struct Predictions {
  std::vector<int> preds, labels;
  Tensor<T> logits;  // [N, 2]
};

/// Evaluation-mode inference over `samples` in fixed-size chunks.
template <typename T>
Predictions<T> predict(FusedModel<T>& model, const std::vector<Sample>& samples, std::size_t batch_size = 64) {
  if (samples.empty()) throw ValidationError("predict: no samples");
  const bool was = model.training();
  model.set_training(false);
  NoGradGuard ng;
  Predictions<T> out;
  out.logits = Tensor<T>({samples.size(), 2});
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    auto b = make_batch<T>(samples, idx);
    auto logits = model.forward(b.inputs);
    std::copy(logits.value().data(), logits.value().data() + logits.size(), out.logits.data() + start * 2);
    auto p = argmax_rows(logits.value());
    out.preds.insert(out.preds.end(), p.begin(), p.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  }
  model.set_training(was);
  return out;
}

// ----------------------------------------------------------- training loop

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0, train_acc = 0.0, val_acc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  bool diverged = false;
  std::string divergence_report;
  double best_val_acc = -1.0;
  std::size_t best_epoch = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;        // empty: nothing written
  std::string name = "model";           // checkpoint file stem
  nlohmann::json meta = nlohmann::json::object();
  std::function<void(const EpochStats&)> on_epoch = {};
  std::function<bool(const EpochStats&)> stop = {};  // true ends training after this epoch
};

inline void write_history_csv(const std::filesystem::path& path, const std::vector<EpochStats>& h) {
  std::ofstream o(path);
  if (!o) throw ValidationError("cannot write " + path.string());
  o << "epoch,train_loss,train_acc,val_acc,seconds\n";
  char line[256];
  for (const auto& e : h) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.6f\n", e.epoch, e.train_loss, e.train_acc, e.val_acc, e.seconds);
    o << line;
  }
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot(const ParamRegistry<T>& reg) {
  std::vector<Tensor<T>> s;
  for (const auto& p : reg.params()) s.push_back(p.var.value());
  for (const auto& b : reg.buffers()) s.push_back(*b.tensor);
  return s;
}

template <typename T>
void restore(const ParamRegistry<T>& reg, const std::vector<Tensor<T>>& s) {
  std::size_t k = 0;
  for (const auto& p : reg.params()) {
    Var<T> v = p.var;
    v.mutable_value() = s[k++];
  }
  for (const auto& b : reg.buffers()) *b.tensor = s[k++];
}

/// Head inputs for every sample, computed once in evaluation mode.
template <typename T>
Tensor<T> cached_features(FusedModel<T>& model, const std::vector<Sample>& samples) {
  NoGradGuard ng;
  Tensor<T> out;
  std::size_t width = 0;
  for (std::size_t start = 0; start < samples.size(); start += 64) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + 64); ++i) idx.push_back(i);
    auto z = model.features(make_batch<T>(samples, idx).inputs);
    if (start == 0) {
      width = z.dim(1);
      out = Tensor<T>({samples.size(), width});
    }
    std::copy(z.value().data(), z.value().data() + z.size(), out.data() + start * width);
  }
  return out;
}

template <typename T>
Var<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& idx) {
  const std::size_t w = table.dim(1);
  Tensor<T> out({idx.size(), w});
  for (std::size_t k = 0; k < idx.size(); ++k) std::copy(table.data() + idx[k] * w, table.data() + (idx[k] + 1) * w, out.data() + k * w);
  return Var<T>(std::move(out));
}

}  // namespace detail

/// Trains for recipe.epochs x ceil(N / batch) steps. Frozen groups from the
/// recipe are applied first. A non-finite loss stops training, restores the
/// parameters from the start of the failing epoch and fills the divergence
/// report. With out_dir set, writes <name>.ckpt (last), <name>.best.ckpt
/// (best validation accuracy) and <name>.history.csv.
template <typename T>
TrainResult train(FusedModel<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainRecipe& recipe, const TrainOptions& opts = {}) {
  recipe.validate();
  if (train_set.empty()) throw ValidationError("train: empty training set");
  if (!recipe.freeze.empty()) model.freeze(recipe.freeze);
  const bool cache = model.backbones_frozen() && model.strategy() != Strategy::intermediate &&
                     model.strategy() != Strategy::early;
  auto reg = model.registry();
  Optimizer<T> opt(recipe);
  Rng order_rng(recipe.seed ^ 0x5EEDULL);
  TrainResult result;
  const bool det = deterministic_mode();
  const bool write = !opts.out_dir.empty();
  if (write) std::filesystem::create_directories(opts.out_dir);

  model.set_training(false);
  Tensor<T> train_feats, val_feats;
  if (cache) {
    train_feats = detail::cached_features(model, train_set);
    if (!val_set.empty()) val_feats = detail::cached_features(model, val_set);
  }
  std::vector<int> train_labels;
  for (const auto& s : train_set) train_labels.push_back(static_cast<int>(s.label));

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= recipe.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto before = detail::snapshot(reg);
    order_rng.shuffle(order);
    model.set_training(true);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    bool finite = true;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + recipe.batch_size)));
      Var<T> logits;
      std::vector<int> labels;
      if (cache) {
        logits = model.classify(detail::gather_rows(train_feats, idx));
        for (auto i : idx) labels.push_back(train_labels[i]);
      } else {
        auto b = make_batch<T>(train_set, idx);
        logits = model.forward(b.inputs);
        labels = std::move(b.labels);
      }
      auto loss = cross_entropy(logits, labels);
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv)) {
        finite = false;
        result.divergence_report = "non-finite loss at epoch " + std::to_string(epoch) + ", step starting at sample " +
                                   std::to_string(start) + "; parameters restored to the start of the epoch";
        break;
      }
      backward(loss);
      opt.step(reg);
      zero_grads(reg);
      loss_sum += lv * static_cast<double>(idx.size());
      const auto p = argmax_rows(logits.value());
      for (std::size_t k = 0; k < p.size(); ++k) hits += p[k] == labels[k];
    }
    model.set_training(false);
    if (!finite) {
      detail::restore(reg, before);
      result.diverged = true;
      if (write) save_checkpoint(opts.out_dir / (opts.name + ".ckpt"), model, &opt, opts.meta);
      break;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(train_set.size());
    st.train_acc = static_cast<double>(hits) / static_cast<double>(train_set.size());
    if (!val_set.empty()) {
      std::vector<int> preds;
      if (cache) {
        NoGradGuard ng;
        std::vector<std::size_t> all(val_set.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        preds = argmax_rows(model.classify(detail::gather_rows(val_feats, all)).value());
      } else {
        preds = predict(model, val_set).preds;
      }
      std::vector<int> vl;
      for (const auto& s : val_set) vl.push_back(static_cast<int>(s.label));
      st.val_acc = binary_accuracy(preds, vl);
      if (st.val_acc > result.best_val_acc) {
        result.best_val_acc = st.val_acc;
        result.best_epoch = epoch;
        if (write) save_checkpoint(opts.out_dir / (opts.name + ".best.ckpt"), model, &opt, opts.meta);
      }
    }
    st.seconds = det ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(st);
    if (opts.on_epoch) opts.on_epoch(st);
    if (opts.stop && opts.stop(st)) break;
  }
  if (write) {
    if (!result.diverged) save_checkpoint(opts.out_dir / (opts.name + ".ckpt"), model, &opt, opts.meta);
    write_history_csv(opts.out_dir / (opts.name + ".history.csv"), result.history);
    if (result.diverged) {
      std::ofstream(opts.out_dir / (opts.name + ".divergence.txt")) << result.divergence_report << '\n';
    }
  }
  return result;
}

}  // namespace mmfuse
