#include "foma/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "foma/focus.hpp"

namespace foma {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return x;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects on/off, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw ConfigError("'" + key + "' expects a comma-separated list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

nlohmann::json labels_to_json(const LabelSpace& ls) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : ls.compositions) comps.push_back({c.attr, c.obj});
  std::vector<int> presence(ls.split_presence.begin(), ls.split_presence.end());
  std::vector<int> seen(ls.seen.begin(), ls.seen.end());
  return {{"attributes", ls.attributes}, {"objects", ls.objects}, {"compositions", comps}, {"seen", seen},
          {"split_presence", presence}};
}

LabelSpace labels_from_json(const nlohmann::json& j) {
  LabelSpace ls;
  ls.attributes = j.at("attributes").get<std::vector<std::string>>();
  ls.objects = j.at("objects").get<std::vector<std::string>>();
  for (const auto& c : j.at("compositions")) ls.compositions.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>()});
  for (int s : j.at("seen").get<std::vector<int>>()) ls.seen.push_back(s != 0);
  for (int p : j.at("split_presence").get<std::vector<int>>()) ls.split_presence.push_back(static_cast<std::uint8_t>(p));
  return ls;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k{
      "alpha",           "tau",           "lr",          "weight_decay",     "epochs",
      "batch_size",      "seed",          "schedule",    "strategy",         "pooling",
      "focus_loss",      "detach_maps",   "levels",      "channels",         "embedding_dim",
      "predictor_widths", "backbone_widths", "backbone_seed", "attention_heads", "gcn_layers",
      "fuse",            "freeze_node_init", "backbone",  "backbone_weights", "embeddings",
      "image_size",      "eval_grid"};
  return k;
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "alpha") alpha = parse_double(key, v);
  else if (key == "tau") model.tau = parse_double(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "weight_decay") weight_decay = parse_double(key, v);
  else if (key == "epochs") epochs = parse_uint(key, v);
  else if (key == "batch_size") batch_size = parse_uint(key, v);
  else if (key == "seed") seed = model.seed = parse_uint(key, v);
  else if (key == "schedule") {
    if (v != "cosine" && v != "constant") throw ConfigError("schedule must be cosine or constant");
    schedule = v;
  } else if (key == "strategy") model.strategy = parse_agg_strategy(v);
  else if (key == "pooling") model.pooling = parse_pooling(v);
  else if (key == "focus_loss") focus = parse_bool(key, v);
  else if (key == "detach_maps") detach_maps = parse_bool(key, v);
  else if (key == "levels") model.backbone.levels = parse_list(key, v);
  else if (key == "channels") model.backbone.target_channels = parse_uint(key, v);
  else if (key == "embedding_dim") model.embedding_dim = parse_uint(key, v);
  else if (key == "predictor_widths") model.predictor_widths = parse_list(key, v);
  else if (key == "backbone_widths") model.backbone.stage_channels = parse_list(key, v);
  else if (key == "backbone_seed") model.backbone.seed = parse_uint(key, v);
  else if (key == "attention_heads") model.attention_heads = parse_uint(key, v);
  else if (key == "gcn_layers") model.gcn_layers = parse_uint(key, v);
  else if (key == "fuse") model.fuse = parse_fuse(v);
  else if (key == "freeze_node_init") model.freeze_node_init = parse_bool(key, v);
  else if (key == "backbone") {
    if (v == "desk") model.backbone.kind = BackboneKind::desk;
    else if (v == "external") model.backbone.kind = BackboneKind::external;
    else throw ConfigError("backbone must be desk or external");
  } else if (key == "backbone_weights") model.backbone.external_weights = v;
  else if (key == "embeddings") model.embedding_file = v;
  else if (key == "image_size") model.backbone.input_size = parse_uint(key, v);
  else if (key == "eval_grid") {
    if (v.empty() || v == "exact") eval_grid.reset();
    else eval_grid = parse_uint(key, v);
  } else throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::validate() const {
  model.validate();
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2 (batch normalization)");
}

nlohmann::json TrainConfig::to_json() const {
  const ModelConfig& m = model;
  return {{"alpha", fmt(alpha)},
          {"tau", fmt(m.tau)},
          {"lr", fmt(lr)},
          {"weight_decay", fmt(weight_decay)},
          {"epochs", std::to_string(epochs)},
          {"batch_size", std::to_string(batch_size)},
          {"seed", std::to_string(seed)},
          {"schedule", schedule},
          {"strategy", to_string(m.strategy)},
          {"pooling", to_string(m.pooling)},
          {"focus_loss", focus ? "on" : "off"},
          {"detach_maps", detach_maps ? "on" : "off"},
          {"levels", join(m.backbone.levels)},
          {"channels", std::to_string(m.backbone.target_channels)},
          {"embedding_dim", std::to_string(m.embedding_dim)},
          {"predictor_widths", join(m.predictor_widths)},
          {"backbone_widths", join(m.backbone.stage_channels)},
          {"backbone_seed", std::to_string(m.backbone.seed)},
          {"attention_heads", std::to_string(m.attention_heads)},
          {"gcn_layers", std::to_string(m.gcn_layers)},
          {"fuse", to_string(m.fuse)},
          {"freeze_node_init", m.freeze_node_init ? "on" : "off"},
          {"backbone", m.backbone.kind == BackboneKind::desk ? "desk" : "external"},
          {"backbone_weights", m.backbone.external_weights.string()},
          {"embeddings", m.embedding_file.string()},
          {"image_size", std::to_string(m.backbone.input_size)},
          {"eval_grid", eval_grid ? std::to_string(*eval_grid) : "exact"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  // seed also reseeds the model; keep the stored model seed authoritative
  return c;
}

TrainConfig load_train_config(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

// ---------------------------------------------------------------------------
// Losses and optimizer

ag::Var cross_entropy(const ag::Var& logits, const std::vector<std::size_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= s[1]) throw ValidationError("label " + std::to_string(y) + " out of range for " + std::to_string(s[1]) + " classes");
  }
  return ag::scale(ag::sum_all(ag::gather_last(ag::log_softmax_last(logits), labels)), -1.0 / static_cast<double>(s[0]));
}

nlohmann::json LossBreakdown::to_json() const {
  nlohmann::json j{{"L_cls_a", cls_a}, {"L_cls_o", cls_o}, {"L_cls_c", cls_c}, {"total", total}};
  if (focus) j["L_f"] = *focus;
  return j;
}

Adam::Adam(nn::ParamList params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::step(const std::vector<ag::Var>& grads) {
  if (grads.size() != params_.size()) throw std::logic_error("Adam: gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!grads[i].defined()) continue;
    Tensor& p = params_[i].var.mutable_value();
    const Tensor& g = grads[i].value();
    const double wd = params_[i].decay ? wd_ : 0.0;
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = g.data[k] + wd * p.data[k];
      m_[i].data[k] = b1_ * m_[i].data[k] + (1.0 - b1_) * gk;
      v_[i].data[k] = b2_ * v_[i].data[k] + (1.0 - b2_) * gk * gk;
      const double mh = m_[i].data[k] / c1;
      const double vh = v_[i].data[k] / c2;
      p.data[k] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

void Adam::save_state(TensorArchive& a) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    a.tensors.emplace_back("adam.m/" + params_[i].name, m_[i]);
    a.tensors.emplace_back("adam.v/" + params_[i].name, v_[i]);
  }
}

void Adam::load_state(const TensorArchive& a, std::uint64_t steps) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i] = a.at("adam.m/" + params_[i].name);
    v_[i] = a.at("adam.v/" + params_[i].name);
  }
  t_ = steps;
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.schedule == "constant") return cfg.lr;
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(cfg.epochs)));
}

// ---------------------------------------------------------------------------
// Objective

ObjectiveResult objective(FomaModel& model, const TrainConfig& cfg, const ModelInput& input,
                          const std::vector<std::size_t>& attr, const std::vector<std::size_t>& obj,
                          const std::vector<std::size_t>& comp, bool training) {
  const ModelOutput out = model.forward(input, training);
  const ag::Var la = cross_entropy(out.s_a, attr);
  const ag::Var lo = cross_entropy(out.s_o, obj);
  const ag::Var lc = cross_entropy(out.s_c, comp);
  ObjectiveResult r;
  r.total = ag::add(ag::add(la, lo), lc);
  r.losses.cls_a = la.item();
  r.losses.cls_o = lo.item();
  r.losses.cls_c = lc.item();
  if (cfg.focus) {
    const bool second_order = !cfg.detach_maps && cfg.alpha > 0.0;
    const ag::Var score = ag::add(ag::add(ground_truth_score(out.s_a, attr), ground_truth_score(out.s_o, obj)),
                                  ground_truth_score(out.s_c, comp));
    const auto maps = attention_maps(
        score, {out.branch[kBranchAttr], out.branch[kBranchObj], out.branch[kBranchComp]}, second_order);
    const FocusResult fl = focused_loss(maps[0], maps[1], maps[2]);
    r.losses.focus = fl.loss.item();
    if (cfg.alpha > 0.0) r.total = ag::add(r.total, ag::scale(fl.loss, cfg.alpha));
  }
  r.losses.total = r.total.item();
  return r;
}

LossBreakdown train_step(FomaModel& model, Adam& opt, const TrainConfig& cfg, const SplitData& data,
                         const std::vector<std::size_t>& indices, std::uint64_t pass) {
  std::vector<std::size_t> attr, obj, comp;
  for (std::size_t i : indices) {
    attr.push_back(data.attr[i]);
    obj.push_back(data.obj[i]);
    comp.push_back(data.comp[i]);
  }
  const ObjectiveResult r = objective(model, cfg, data.batch(indices, pass), attr, obj, comp, true);
  if (!std::isfinite(r.losses.total)) {
    throw TrainingAborted("non-finite loss at step " + std::to_string(opt.steps() + 1) + ": " + r.losses.to_json().dump());
  }
  std::vector<ag::Var> vars;
  for (const auto& p : opt.params()) vars.push_back(p.var);
  opt.step(ag::grad(r.total, vars, {.create_graph = false, .allow_unused = true}));
  return r.losses;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& path, FomaModel& model, const Adam& opt, const TrainConfig& cfg,
                     std::size_t epoch, const nlohmann::json& extra) {
  TensorArchive a;
  a.magic = kCheckpointMagic;
  a.version = kCheckpointVersion;
  const BackboneConfig& bb = model.config().backbone;
  a.meta = {{"config", cfg.to_json()},
            {"epoch", epoch},
            {"adam_steps", opt.steps()},
            {"labels", labels_to_json(model.labels())},
            {"backbone", {{"kind", bb.kind == BackboneKind::desk ? "desk" : "external"}, {"seed", bb.seed}}},
            {"extra", extra}};
  for (const auto& p : model.parameters()) a.tensors.emplace_back("param/" + p.name, p.var.value());
  for (const auto& b : model.buffers()) a.tensors.emplace_back("buffer/" + b.name, *b.tensor);
  opt.save_state(a);
  const fs::path tmp = path.string() + ".tmp";
  write_archive(tmp, a);
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  Checkpoint c;
  c.archive = read_archive(path, kCheckpointMagic, kCheckpointVersion);
  c.config = TrainConfig::from_json(c.archive.meta.at("config"));
  c.labels = labels_from_json(c.archive.meta.at("labels"));
  c.epoch = c.archive.meta.at("epoch").get<std::size_t>();
  return c;
}

void restore_model(FomaModel& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    const Tensor& t = ckpt.archive.at("param/" + p.name);
    if (t.shape != p.var.shape()) {
      throw SchemaError("checkpoint tensor " + p.name + " has shape " + shape_str(t.shape) + ", model expects " +
                        shape_str(p.var.shape()));
    }
    p.var.mutable_value() = t;
  }
  for (auto& b : model.buffers()) {
    const Tensor& t = ckpt.archive.at("buffer/" + b.name);
    if (t.shape != b.tensor->shape) throw SchemaError("checkpoint buffer " + b.name + " has the wrong shape");
    *b.tensor = t;
  }
}

// ---------------------------------------------------------------------------
// Loop

nlohmann::json EpochMetrics::to_json() const {
  nlohmann::json j{{"epoch", epoch}, {"lr", lr}, {"L_cls_a", cls_a}, {"L_cls_o", cls_o}, {"L_cls_c", cls_c},
                   {"total", total}, {"seconds", seconds}};
  if (focus) j["L_f"] = *focus;
  if (val) {
    j["val"] = {{"S", val->fused.S}, {"U", val->fused.U}, {"AUC", val->fused.AUC}, {"HM", val->fused.HM}};
    j["val_composition_only"] = {{"S", val->composition.S}, {"U", val->composition.U},
                                 {"AUC", val->composition.AUC}, {"HM", val->composition.HM}};
  }
  return j;
}

TrainResult train_prepared(FomaModel& model, const TrainConfig& cfg, const SplitData& train_data,
                           const SplitData& val_data, const TrainIO& io) {
  cfg.validate();
  if (train_data.size() < 2) throw ValidationError("training split needs at least two samples");
  auto log = [&](const std::string& s) {
    if (io.log) io.log(s);
  };
  fs::create_directories(io.out_dir / "checkpoints");
  std::ofstream steps(io.out_dir / "steps.jsonl");
  std::ofstream metrics(io.out_dir / "metrics.jsonl");
  if (!steps || !metrics) throw std::runtime_error("cannot write logs under " + io.out_dir.string());

  bool val_ok = false;
  if (val_data.size() > 0) {
    bool s = false, u = false;
    for (std::size_t y : val_data.comp) (model.labels().seen[y] ? s : u) = true;
    val_ok = s && u;
  }
  if (!val_ok) log("validation split lacks seen or unseen samples; best checkpoint follows the last epoch");

  Adam opt(model.parameters(), cfg.lr, cfg.weight_decay);
  TrainResult result;
  std::uint64_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = scheduled_lr(cfg, epoch);
    opt.set_lr(em.lr);

    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed({cfg.seed, epoch, 0x0dde}));
    shuffle_rng.shuffle(order.begin(), order.end());

    double fsum = 0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;  // batch norm needs two samples
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const LossBreakdown lb = train_step(model, opt, cfg, train_data, idx, epoch);
      ++global_step;
      nlohmann::json line = lb.to_json();
      line["epoch"] = epoch + 1;
      line["step"] = global_step;
      line["lr"] = em.lr;
      steps << line.dump() << '\n';
      em.cls_a += lb.cls_a;
      em.cls_o += lb.cls_o;
      em.cls_c += lb.cls_c;
      em.total += lb.total;
      if (lb.focus) fsum += *lb.focus;
      ++nb;
    }
    if (!steps) throw std::runtime_error("failed writing the step log");
    const double inv = 1.0 / static_cast<double>(nb);
    em.cls_a *= inv;
    em.cls_o *= inv;
    em.cls_c *= inv;
    em.total *= inv;
    if (cfg.focus) em.focus = fsum * inv;

    if (val_ok) em.val = report_split(score_split(model, val_data), cfg.eval_grid);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << em.to_json().dump() << '\n';
    metrics.flush();
    if (!metrics) throw std::runtime_error("failed writing the metrics log");

    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", epoch + 1);
    const fs::path last = io.out_dir / "checkpoints" / (io.keep_epoch_checkpoints ? name : "last.ckpt");
    save_checkpoint(last, model, opt, cfg, epoch + 1);
    result.last_checkpoint = last;
    const double hm = em.val ? em.val->fused.HM : 0.0;
    if (!val_ok || hm > result.best_hm) {
      result.best_hm = hm;
      result.best_epoch = epoch + 1;
      result.best_checkpoint = io.out_dir / "checkpoints" / "best.ckpt";
      save_checkpoint(result.best_checkpoint, model, opt, cfg, epoch + 1, {{"val_hm", hm}});
    }
    std::string msg = "epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " loss " +
                      fmt(em.total).substr(0, 8);
    if (em.focus) msg += " L_f " + fmt(*em.focus).substr(0, 8);
    if (em.val) msg += " val HM " + fmt(em.val->fused.HM).substr(0, 6) + " U " + fmt(em.val->fused.U).substr(0, 6);
    msg += " (" + fmt(em.seconds).substr(0, 5) + " s)";
    log(msg);
    result.epochs.push_back(std::move(em));
  }
  return result;
}

TrainResult train(const TrainConfig& cfg, const LabelSpace& labels, const DatasetManifest& manifest, const TrainIO& io) {
  cfg.validate();
  FomaModel model(cfg.model, labels);
  const SplitData train_data = load_split(model, manifest, Split::train);
  const SplitData val_data = load_split(model, manifest, Split::val);
  return train_prepared(model, cfg, train_data, val_data, io);
}

// ---------------------------------------------------------------------------
// Evaluation

CheckpointEvaluation evaluate_model(FomaModel& model, const TrainConfig& cfg, const SplitData& data,
                                    std::optional<std::size_t> grid) {
  CheckpointEvaluation ev;
  ev.config = cfg;
  ev.scores = score_split(model, data);
  ev.report = report_split(ev.scores, grid);
  const nlohmann::json echo{{"alpha", cfg.alpha}, {"tau", cfg.model.tau}, {"seed", cfg.seed}};
  ev.report.fused.config = echo;
  ev.report.composition.config = echo;
  return ev;
}

CheckpointEvaluation evaluate_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest, Split split,
                                         std::optional<std::size_t> grid) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  FomaModel model(ck.config.model, ck.labels);
  restore_model(model, ck);
  const SplitData data = load_split(model, manifest, split);
  if (data.size() == 0) throw ValidationError("split '" + to_string(split) + "' has no samples");
  return evaluate_model(model, ck.config, data, grid);
}

}  // namespace foma
