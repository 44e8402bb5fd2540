#include "sdst/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace sdst {

namespace fs = std::filesystem;

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'D', 'S', 'T', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("truncated-file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot-open: " + path);
  os.write(kCheckpointMagic, 8);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(ckpt.config_text.size()));
  os.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  put_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, 2);
    put_u32(os, static_cast<std::uint32_t>(e.value.rows()));
    put_u32(os, static_cast<std::uint32_t>(e.value.cols()));
    for (Index i = 0; i < e.value.size(); ++i) put_f32(os, e.value.data()[i]);
  }
  if (!os) throw Error("write-failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot-open: " + path);
  char magic[8];
  if (!is.read(magic, 8)) throw Error("truncated-file");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error("bad-magic");
  if (get_u32(is) != kCheckpointVersion) throw Error("unsupported-version");
  Checkpoint c;
  c.config_text.resize(get_u32(is));
  if (!is.read(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size())))
    throw Error("truncated-file");
  const std::uint32_t n = get_u32(is);
  for (std::uint32_t k = 0; k < n; ++k) {
    CheckpointEntry e;
    e.name.resize(get_u32(is));
    if (!is.read(e.name.data(), static_cast<std::streamsize>(e.name.size())))
      throw Error("truncated-file");
    const std::uint32_t rank = get_u32(is);
    if (rank != 2) throw Error("unsupported-rank");
    const std::uint32_t rows = get_u32(is);
    const std::uint32_t cols = get_u32(is);
    e.value.resize(rows, cols);
    for (Index i = 0; i < e.value.size(); ++i) e.value.data()[i] = get_f32(is);
    c.entries.push_back(std::move(e));
  }
  return c;
}

Checkpoint snapshot(const SdstModel<float>& model, const RunConfig& cfg) {
  Checkpoint c;
  c.config_text = cfg.to_text();
  for (const auto& [name, v] : model.params().entries()) c.entries.push_back({name, v.value()});
  return c;
}

void restore(SdstModel<float>& model, const Checkpoint& ckpt) {
  const auto& entries = model.params().entries();
  if (entries.size() != ckpt.entries.size()) throw Error("config-mismatch: parameter count");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, v] = entries[i];
    const auto& e = ckpt.entries[i];
    if (e.name != name || e.value.rows() != v.rows() || e.value.cols() != v.cols())
      throw Error("config-mismatch: " + e.name);
    Var<float> handle = v;
    handle.mutable_value() = e.value;
  }
}

SdstModel<float> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out) {
  const RunConfig cfg = RunConfig::from(KeyValues::parse(ckpt.config_text));
  SdstModel<float> model(cfg.model, cfg.seed);
  restore(model, ckpt);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

ModelInput<float> make_input(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw Error("empty-batch");
  ModelInput<float> in;
  in.groups = static_cast<Index>(indices.size());
  in.frames = data.frames;
  in.tokens = data.tokens;
  for (Index l = 0; l < data.levels; ++l) {
    LevelFeatures<float> lf;
    lf.video.resize(in.groups * data.frames, data.video_dim);
    lf.text.resize(in.groups * data.tokens, data.text_dim);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto& s = data.samples.at(indices[b]);
      lf.video.middleRows(static_cast<Index>(b) * data.frames, data.frames) = s.video[static_cast<std::size_t>(l)];
      lf.text.middleRows(static_cast<Index>(b) * data.tokens, data.tokens) = s.text[static_cast<std::size_t>(l)];
    }
    in.levels.push_back(std::move(lf));
  }
  return in;
}

std::vector<SampleTargets> make_targets(const Dataset& data, const std::vector<std::size_t>& indices) {
  std::vector<SampleTargets> out;
  for (std::size_t i : indices) out.push_back({data.samples.at(i).moments, data.samples.at(i).positives});
  return out;
}

AdamW::AdamW(const ParamSet<float>& params, const OptimConfig& cfg) : params_(params), cfg_(cfg) {
  for (const auto& [name, v] : params.entries()) {
    m_.push_back(MatrixF::Zero(v.rows(), v.cols()));
    v_.push_back(MatrixF::Zero(v.rows(), v.cols()));
  }
}

double AdamW::grad_norm() const {
  double sq = 0.0;
  for (const auto& [name, v] : params_.entries())
    if (v.grad().size() != 0) sq += v.grad().cast<double>().squaredNorm();
  return std::sqrt(sq);
}

double AdamW::step(double lr) {
  const double norm = grad_norm();
  const double clip = norm > cfg_.clip_norm ? cfg_.clip_norm / (norm + 1e-6) : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var<float> p = entries[i].second;
    MatrixF& w = p.mutable_value();
    w *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
    if (p.grad().size() == 0) continue;
    const MatrixF g = p.grad() * static_cast<float>(clip);
    m_[i] = static_cast<float>(cfg_.beta1) * m_[i] + static_cast<float>(1.0 - cfg_.beta1) * g;
    v_[i] = static_cast<float>(cfg_.beta2) * v_[i] +
            static_cast<float>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const auto denom = (v_[i].array() / static_cast<float>(bc2)).sqrt() + static_cast<float>(cfg_.eps);
    w.array() -= static_cast<float>(lr) * (m_[i].array() / static_cast<float>(bc1)) / denom;
  }
  return norm;
}

double MetricReport::get(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e.value;
  throw Error("unknown-metric: " + name);
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os << std::setprecision(10);
  for (const auto& e : entries) os << e.name << " = " << e.value << '\n';
  os << "excluded_mr = " << excluded_mr << '\n' << "excluded_hd = " << excluded_hd << '\n';
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json j;
    j["name"] = e.name;
    j["value"] = e.value;
    j["threshold"] = std::isnan(e.threshold) ? nlohmann::json(nullptr) : nlohmann::json(e.threshold);
    arr.push_back(j);
  }
  return arr.dump(2);
}

void MetricReport::write(const std::string& dir, const std::string& stem) const {
  fs::create_directories(dir);
  std::ofstream(fs::path(dir) / (stem + ".txt")) << to_text();
  std::ofstream(fs::path(dir) / (stem + ".json")) << to_json() << '\n';
}

namespace {

std::vector<std::vector<std::size_t>> chunks(std::size_t n, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> b;
    for (std::size_t j = i; j < std::min(n, i + static_cast<std::size_t>(batch_size)); ++j) b.push_back(j);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace

std::vector<SamplePrediction> predict(const SdstModel<float>& model, const Dataset& data,
                                      int batch_size, const SoftNmsSettings& nms) {
  if (data.samples.empty()) throw Error("empty-dataset");
  std::vector<SamplePrediction> out;
  const Index m = model.config().queries;
  for (const auto& batch : chunks(data.samples.size(), batch_size)) {
    const auto preds = model.forward(make_input(data, batch));
    const auto& last = preds.levels.back();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      SamplePrediction sp;
      std::vector<ScoredMoment> cands;
      for (Index q = 0; q < m; ++q) {
        const Index r = static_cast<Index>(b) * m + q;
        cands.push_back({{last.moments.value()(r, 0), last.moments.value()(r, 1)},
                         confidence(last.probs.value()(r, 0), preds.actionness.value()(r, 0))});
      }
      sp.ranked = soft_nms(cands, nms);
      for (Index t = 0; t < data.frames; ++t)
        sp.saliency.push_back(preds.saliency.value()(static_cast<Index>(b) * data.frames + t, 0));
      out.push_back(std::move(sp));
    }
  }
  return out;
}

MetricReport score_predictions(const std::vector<SamplePrediction>& preds, const Dataset& data) {
  if (preds.size() != data.samples.size() || preds.empty()) throw Error("empty-dataset");
  RankedPredictions ranked;
  GroundTruth gts;
  double hd_ap = 0.0, hit = 0.0;
  int hd_count = 0;
  MetricReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ranked.push_back(preds[i].ranked);
    gts.push_back(data.samples[i].moments);
    const auto h = highlight_metrics(preds[i].saliency, data.samples[i].positives);
    if (!h.valid) {
      ++r.excluded_hd;
      continue;
    }
    hd_ap += h.ap;
    hit += h.hit_at_1;
    ++hd_count;
  }
  const auto recall = recall_at_1(ranked, gts);
  const auto map = mean_average_precision(ranked, gts);
  r.excluded_mr = recall.excluded;
  for (std::size_t k = 0; k < recall.thresholds.size(); ++k)
    r.entries.push_back({"R1@" + fmt(recall.thresholds[k]), recall.values[k], recall.thresholds[k]});
  r.entries.push_back({"mAP", map.mean});
  for (std::size_t k = 0; k < map.thresholds.size(); ++k)
    r.entries.push_back({"mAP@" + fmt(map.thresholds[k]), map.ap[k], map.thresholds[k]});
  r.entries.push_back({"mIoU", mean_iou(ranked, gts)});
  r.entries.push_back({"HD_AP", hd_count ? hd_ap / hd_count : 0.0});
  r.entries.push_back({"HIT@1", hd_count ? hit / hd_count : 0.0});
  return r;
}

MetricReport evaluate(const SdstModel<float>& model, const Dataset& data, int batch_size,
                      const SoftNmsSettings& nms) {
  return score_predictions(predict(model, data, batch_size, nms), data);
}

OffsetSummary inspect_offsets(const SdstModel<float>& model, const Dataset& data, int batch_size) {
  if (model.config().strategy == AttentionStrategy::StandardCa) throw Error("no-offsets");
  if (data.samples.empty()) throw Error("empty-dataset");
  const Index heads = model.config().deformable().total_heads();
  const Index points = model.config().points;
  OffsetSummary s;
  s.means.assign(static_cast<std::size_t>(model.config().levels),
                 std::vector<double>(static_cast<std::size_t>(heads), 0.0));
  double rows = 0.0;
  for (const auto& batch : chunks(data.samples.size(), batch_size)) {
    const auto preds = model.forward(make_input(data, batch));
    for (std::size_t l = 0; l < preds.levels.size(); ++l) {
      const Matrix<double> d =
          weighted_offsets(preds.levels[l].offsets.value().cast<double>(),
                           preds.levels[l].scores.value().cast<double>(), heads, points);
      for (Index h = 0; h < heads; ++h) s.means[l][static_cast<std::size_t>(h)] += d.col(h).sum();
    }
    rows += static_cast<double>(batch.size() * static_cast<std::size_t>(model.config().queries));
  }
  for (auto& level : s.means)
    for (double& v : level) {
      v /= rows;
      if (v < -1.0 || v > 1.0) s.beyond_boundaries = true;
    }
  return s;
}

void write_offset_trace(const std::string& path, const OffsetSummary& summary) {
  std::ofstream os(path);
  if (!os) throw Error("cannot-open: " + path);
  os << "level,head,mean_weighted_offset\n" << std::setprecision(10);
  for (std::size_t l = 0; l < summary.means.size(); ++l)
    for (std::size_t h = 0; h < summary.means[l].size(); ++h)
      os << l << ',' << h << ',' << summary.means[l][h] << '\n';
}

TrainSummary train(const RunConfig& cfg, const Dataset& train_set, const Dataset* eval_set,
                   const std::string& out_dir, std::ostream* progress) {
  cfg.validate();
  if (train_set.samples.empty()) throw Error("empty-dataset");
  if (train_set.video_dim != cfg.model.video_dim || train_set.text_dim != cfg.model.text_dim)
    throw Error("config-mismatch: feature widths");
  if (train_set.levels != cfg.model.levels) throw Error("config-mismatch: levels");
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::ofstream(dir / "config.ini") << cfg.to_text();
  std::ofstream loss_log(dir / "loss_log.csv");
  std::ofstream metric_log(dir / "metric_log.csv");
  loss_log << "step,component,value\n" << std::setprecision(8);
  metric_log << "epoch,metric,value\n" << std::setprecision(10);

  SdstModel<float> model(cfg.model, cfg.seed);
  AdamW opt(model.params(), cfg.optim);
  Rng shuffle_rng(cfg.seed + 2);
  Rng noise_rng(cfg.seed + 1);
  ForwardContext ctx;
  ctx.training = true;
  ctx.rng = &noise_rng;
  ctx.dropout = cfg.model.dropout;
  ctx.drop_path = cfg.model.drop_path;

  TrainSummary summary;
  summary.final_checkpoint = (dir / "checkpoint_final.bin").string();
  summary.best_checkpoint = (dir / "checkpoint_best.bin").string();
  const Dataset& select_set = eval_set != nullptr ? *eval_set : train_set;

  auto evaluate_and_select = [&](int epoch) {
    const MetricReport rep = evaluate(model, select_set, cfg.optim.batch_size, cfg.nms);
    for (const auto& e : rep.entries) metric_log << epoch << ',' << e.name << ',' << e.value << '\n';
    const double score = rep.get("mAP");
    if (score > summary.best_score) {
      summary.best_score = score;
      save_checkpoint(summary.best_checkpoint, snapshot(model, cfg));
    }
    if (progress) *progress << "epoch " << epoch << " mAP " << score << std::endl;
  };

  std::vector<std::size_t> order(train_set.samples.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  bool done = cfg.optim.max_steps > 0 && step >= cfg.optim.max_steps;
  int epoch = 0;
  for (; epoch < cfg.optim.epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    for (std::size_t start = 0; start < order.size() && !done;
         start += static_cast<std::size_t>(cfg.optim.batch_size)) {
      const std::vector<std::size_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + static_cast<std::size_t>(cfg.optim.batch_size))));
      Tape<float> tape;
      LossResult<float> loss;
      {
        TapeScope<float> scope(tape);
        const auto preds = model.forward(make_input(train_set, batch), ctx);
        loss = compute_losses(preds, make_targets(train_set, batch), cfg.loss);
        if (!std::isfinite(loss.total.item())) {
          std::ofstream dump(dir / "nonfinite_batch.txt");
          dump << "step " << step << " batch " << start / static_cast<std::size_t>(cfg.optim.batch_size) << '\n';
          for (std::size_t i : batch) dump << train_set.samples[i].id << '\n';
          for (const auto& [k, v] : loss.components) dump << k << ' ' << v << '\n';
          throw Error("non-finite-loss: step " + std::to_string(step) + " batch " +
                      std::to_string(start / static_cast<std::size_t>(cfg.optim.batch_size)));
        }
        tape.backward(loss.total);
      }
      const double lr = cfg.optim.lr * lr_multiplier(cfg.optim, step, epoch);
      const double norm = opt.step(lr);
      model.params().zero_grad();
      tape.clear();
      for (const auto& [k, v] : loss.components) loss_log << step << ',' << k << ',' << v << '\n';
      loss_log << step << ",grad_norm," << norm << '\n' << step << ",lr," << lr << '\n';
      ++step;
      if (progress && step % 100 == 0)
        *progress << "step " << step << " loss " << loss.components.at("total") << std::endl;
      if (cfg.optim.max_steps > 0 && step >= cfg.optim.max_steps) done = true;
    }
    if (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) evaluate_and_select(epoch + 1);
  }
  summary.steps = step;
  summary.epochs = epoch;
  if (cfg.eval_every <= 0 || epoch % cfg.eval_every != 0 || epoch == 0) evaluate_and_select(epoch);
  save_checkpoint(summary.final_checkpoint, snapshot(model, cfg));
  if (cfg.model.strategy != AttentionStrategy::StandardCa)
    write_offset_trace((dir / "offsets.csv").string(),
                       inspect_offsets(model, train_set, cfg.optim.batch_size));
  return summary;
}

}  // namespace sdst
