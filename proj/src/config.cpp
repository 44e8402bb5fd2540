#include "sdst/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sdst {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double as_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw Error("");
    return d;
  } catch (...) {
    throw Error("invalid-config-value: " + key + " = " + v);
  }
}

long long as_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error("invalid-config-value: " + key + " = " + v);
  return out;
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error("invalid-config-value: " + key + " = " + v);
  return out;
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error("invalid-config-value: " + key + " = " + v);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("config-syntax: line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config-syntax: line " + std::to_string(lineno));
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error("config-syntax: line " + std::to_string(lineno));
    kv.set(section.empty() ? key : section + "." + key, trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot-open: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

void KeyValues::set(const std::string& dotted_key, const std::string& value) {
  values_[dotted_key] = value;
}

void KeyValues::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("invalid-override: " + assignment);
  const std::string key = trim(assignment.substr(0, eq));
  if (key.find('.') == std::string::npos) throw Error("invalid-override: " + assignment);
  set(key, trim(assignment.substr(eq + 1)));
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw Error("missing-config-key: " + key);
  return it->second;
}

RunConfig RunConfig::from(const KeyValues& kv, const RunConfig& base) {
  RunConfig c = base;
  for (const auto& [key, v] : kv.values()) {
    auto& m = c.model;
    auto& o = c.optim;
    auto& w = c.loss.weights;
    if (key == "model.width") m.width = as_int(key, v);
    else if (key == "model.levels") m.levels = as_int(key, v);
    else if (key == "model.queries") m.queries = as_int(key, v);
    else if (key == "model.heads") m.heads = as_int(key, v);
    else if (key == "model.ffn_ratio") m.ffn_ratio = as_int(key, v);
    else if (key == "model.video_dim") m.video_dim = as_int(key, v);
    else if (key == "model.text_dim") m.text_dim = as_int(key, v);
    else if (key == "model.attention") m.strategy = parse_attention_strategy(v);
    else if (key == "model.deform_heads") m.deform_heads = as_int(key, v);
    else if (key == "model.center_head") m.center_head = as_bool(key, v);
    else if (key == "model.points") m.points = as_int(key, v);
    else if (key == "model.latent") m.latent = as_int(key, v);
    else if (key == "model.context_hidden") m.context_hidden = as_int(key, v);
    else if (key == "model.roi_size") m.roi_size = as_int(key, v);
    else if (key == "model.regression_depth") m.regression_depth = as_int(key, v);
    else if (key == "model.actionness_depth") m.actionness_depth = as_int(key, v);
    else if (key == "model.shared") m.shared = as_bool(key, v);
    else if (key == "model.dropout") m.dropout = as_double(key, v);
    else if (key == "model.drop_path") m.drop_path = as_double(key, v);
    else if (key == "model.query_init_std") m.query_init_std = as_double(key, v);
    else if (key == "model.ref_init_width") m.ref_init_width = as_double(key, v);
    else if (key == "loss.l1") w.l1 = as_double(key, v);
    else if (key == "loss.iou") w.iou = as_double(key, v);
    else if (key == "loss.saliency") w.saliency = as_double(key, v);
    else if (key == "loss.align_video") w.align_video = as_double(key, v);
    else if (key == "loss.align_layer") w.align_layer = as_double(key, v);
    else if (key == "loss.actionness") w.actionness = as_double(key, v);
    else if (key == "loss.cls") w.cls = as_double(key, v);
    else if (key == "loss.focal_alpha") c.loss.focal_alpha = as_double(key, v);
    else if (key == "loss.focal_gamma") c.loss.focal_gamma = as_double(key, v);
    else if (key == "loss.temperature") c.loss.temperature = as_double(key, v);
    else if (key == "optim.lr") o.lr = as_double(key, v);
    else if (key == "optim.weight_decay") o.weight_decay = as_double(key, v);
    else if (key == "optim.beta1") o.beta1 = as_double(key, v);
    else if (key == "optim.beta2") o.beta2 = as_double(key, v);
    else if (key == "optim.eps") o.eps = as_double(key, v);
    else if (key == "optim.warmup_iters") o.warmup_iters = static_cast<int>(as_int(key, v));
    else if (key == "optim.warmup_ratio") o.warmup_ratio = as_double(key, v);
    else if (key == "optim.decay_epochs") o.decay_epochs = static_cast<int>(as_int(key, v));
    else if (key == "optim.decay_factor") o.decay_factor = as_double(key, v);
    else if (key == "optim.clip_norm") o.clip_norm = as_double(key, v);
    else if (key == "optim.batch_size") o.batch_size = static_cast<int>(as_int(key, v));
    else if (key == "optim.epochs") o.epochs = static_cast<int>(as_int(key, v));
    else if (key == "optim.max_steps") o.max_steps = static_cast<int>(as_int(key, v));
    else if (key == "nms.sigma") c.nms.sigma = as_double(key, v);
    else if (key == "nms.min_score") c.nms.min_score = as_double(key, v);
    else if (key == "nms.top_k") c.nms.top_k = static_cast<int>(as_int(key, v));
    else if (key == "data.pooling") c.pooling = parse_pool_strategy(v);
    else if (key == "data.train_dir") c.train_dir = v;
    else if (key == "data.eval_dir") c.eval_dir = v;
    else if (key == "run.output_dir") c.output_dir = v;
    else if (key == "run.seed") c.seed = as_u64(key, v);
    else if (key == "run.eval_every") c.eval_every = static_cast<int>(as_int(key, v));
    else throw Error("unknown-config-key: " + key);
  }
  return c;
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  const auto& m = model;
  const auto& o = optim;
  const auto& w = loss.weights;
  auto i = [](long long x) { return std::to_string(x); };
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  kv.set("model.width", i(m.width));
  kv.set("model.levels", i(m.levels));
  kv.set("model.queries", i(m.queries));
  kv.set("model.heads", i(m.heads));
  kv.set("model.ffn_ratio", i(m.ffn_ratio));
  kv.set("model.video_dim", i(m.video_dim));
  kv.set("model.text_dim", i(m.text_dim));
  kv.set("model.attention", to_string(m.strategy));
  kv.set("model.deform_heads", i(m.deform_heads));
  kv.set("model.center_head", b(m.center_head));
  kv.set("model.points", i(m.points));
  kv.set("model.latent", i(m.latent));
  kv.set("model.context_hidden", i(m.context_hidden));
  kv.set("model.roi_size", i(m.roi_size));
  kv.set("model.regression_depth", i(m.regression_depth));
  kv.set("model.actionness_depth", i(m.actionness_depth));
  kv.set("model.shared", b(m.shared));
  kv.set("model.dropout", fmt_double(m.dropout));
  kv.set("model.drop_path", fmt_double(m.drop_path));
  kv.set("model.query_init_std", fmt_double(m.query_init_std));
  kv.set("model.ref_init_width", fmt_double(m.ref_init_width));
  kv.set("loss.l1", fmt_double(w.l1));
  kv.set("loss.iou", fmt_double(w.iou));
  kv.set("loss.saliency", fmt_double(w.saliency));
  kv.set("loss.align_video", fmt_double(w.align_video));
  kv.set("loss.align_layer", fmt_double(w.align_layer));
  kv.set("loss.actionness", fmt_double(w.actionness));
  kv.set("loss.cls", fmt_double(w.cls));
  kv.set("loss.focal_alpha", fmt_double(loss.focal_alpha));
  kv.set("loss.focal_gamma", fmt_double(loss.focal_gamma));
  kv.set("loss.temperature", fmt_double(loss.temperature));
  kv.set("optim.lr", fmt_double(o.lr));
  kv.set("optim.weight_decay", fmt_double(o.weight_decay));
  kv.set("optim.beta1", fmt_double(o.beta1));
  kv.set("optim.beta2", fmt_double(o.beta2));
  kv.set("optim.eps", fmt_double(o.eps));
  kv.set("optim.warmup_iters", i(o.warmup_iters));
  kv.set("optim.warmup_ratio", fmt_double(o.warmup_ratio));
  kv.set("optim.decay_epochs", i(o.decay_epochs));
  kv.set("optim.decay_factor", fmt_double(o.decay_factor));
  kv.set("optim.clip_norm", fmt_double(o.clip_norm));
  kv.set("optim.batch_size", i(o.batch_size));
  kv.set("optim.epochs", i(o.epochs));
  kv.set("optim.max_steps", i(o.max_steps));
  kv.set("nms.sigma", fmt_double(nms.sigma));
  kv.set("nms.min_score", fmt_double(nms.min_score));
  kv.set("nms.top_k", i(nms.top_k));
  kv.set("data.pooling", to_string(pooling));
  kv.set("data.train_dir", train_dir);
  kv.set("data.eval_dir", eval_dir);
  kv.set("run.output_dir", output_dir);
  kv.set("run.seed", std::to_string(seed));
  kv.set("run.eval_every", i(eval_every));
  return kv;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  const KeyValues kv = to_key_values();
  for (const auto& [key, v] : kv.values()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) os << '\n';
      os << '[' << s << "]\n";
      section = s;
    }
    os << key.substr(dot + 1) << " = " << v << '\n';
  }
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  loss.weights.validate();
  if (!(loss.temperature > 0.0)) throw Error("invalid-temperature");
  if (optim.batch_size < 1 || optim.epochs < 0 || optim.max_steps < 0 || optim.warmup_iters < 0 ||
      optim.decay_epochs < 1 || !(optim.lr > 0.0) || !(optim.clip_norm > 0.0))
    throw Error("invalid-optim-config");
  if (!(nms.sigma > 0.0) || nms.top_k < 1) throw Error("invalid-nms-config");
}

SynthRun SynthRun::from(const KeyValues& kv) {
  SynthRun r;
  auto& c = r.config;
  for (const auto& [key, v] : kv.values()) {
    auto i = [&] { return static_cast<int>(as_int(key, v)); };
    if (key == "synth.num_samples") c.num_samples = i();
    else if (key == "synth.frames") c.frames = i();
    else if (key == "synth.tokens_v") c.tokens_v = i();
    else if (key == "synth.video_dim") c.video_dim = i();
    else if (key == "synth.text_dim") c.text_dim = i();
    else if (key == "synth.tokens") c.tokens = i();
    else if (key == "synth.levels") c.levels = i();
    else if (key == "synth.concept_dim") c.concept_dim = i();
    else if (key == "synth.min_moments") c.min_moments = i();
    else if (key == "synth.max_moments") c.max_moments = i();
    else if (key == "synth.min_length") c.min_length = i();
    else if (key == "synth.max_length") c.max_length = i();
    else if (key == "synth.noise") c.noise = as_double(key, v);
    else if (key == "synth.marker") c.marker = as_double(key, v);
    else if (key == "synth.pooler_gain") c.pooler_gain = as_double(key, v);
    else if (key == "synth.world_seed") c.world_seed = as_u64(key, v);
    else if (key == "synth.seed") r.seed = as_u64(key, v);
    else if (key == "synth.output_dir") r.output_dir = v;
    else throw Error("unknown-config-key: " + key);
  }
  return r;
}

std::string SynthRun::to_text() const {
  std::ostringstream os;
  const auto& c = config;
  os << "[synth]\n"
     << "num_samples = " << c.num_samples << "\nframes = " << c.frames
     << "\ntokens_v = " << c.tokens_v << "\nvideo_dim = " << c.video_dim
     << "\ntext_dim = " << c.text_dim << "\ntokens = " << c.tokens << "\nlevels = " << c.levels
     << "\nconcept_dim = " << c.concept_dim << "\nmin_moments = " << c.min_moments
     << "\nmax_moments = " << c.max_moments << "\nmin_length = " << c.min_length
     << "\nmax_length = " << c.max_length << "\nnoise = " << fmt_double(c.noise)
     << "\nmarker = " << fmt_double(c.marker) << "\npooler_gain = " << fmt_double(c.pooler_gain)
     << "\nworld_seed = " << c.world_seed << "\nseed = " << seed << "\noutput_dir = " << output_dir
     << '\n';
  return os.str();
}

double lr_multiplier(const OptimConfig& cfg, long iteration, int epoch) {
  double warm = 1.0;
  if (iteration < cfg.warmup_iters) {
    const double frac = static_cast<double>(iteration) / static_cast<double>(cfg.warmup_iters);
    warm = cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * frac;
  }
  return warm * std::pow(cfg.decay_factor, epoch / cfg.decay_epochs);
}

std::string output_root() {
  const char* env = std::getenv("SDST_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string(".");
}

std::string resolve_output(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return p.string();
  return (std::filesystem::path(output_root()) / p).string();
}

}  // namespace sdst
