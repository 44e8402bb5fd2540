#include "sdst/grad_check.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>

#include "sdst/attention.hpp"
#include "sdst/dense_stream.hpp"
#include "sdst/feature_io.hpp"
#include "sdst/geometry.hpp"
#include "sdst/losses.hpp"
#include "sdst/sparse_stream.hpp"

namespace sdst {

namespace {

using M = Matrix<double>;
using V = Var<double>;

struct Problem {
  ParamSet<double> params;
  std::function<V()> loss;
  bool all_elements = false;
};

M randn(Index r, Index c, Rng& rng, double sd = 1.0) { return init::normal<double>(r, c, sd, rng); }
M randu(Index r, Index c, double lo, double hi, Rng& rng) {
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

double evaluate(const Problem& p) { return p.loss().item(); }

GradCheckEntry run_problem(const std::string& target, Problem& p, Rng& rng,
                           const GradCheckOptions& opts) {
  for (const auto& [name, v] : p.params.entries()) v.zero_grad();
  std::vector<M> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const V loss = p.loss();
    tape.backward(loss);
  }
  for (const auto& [name, v] : p.params.entries())
    analytic.push_back(v.grad().size() ? v.grad() : M::Zero(v.rows(), v.cols()));

  GradCheckEntry e;
  e.target = target;
  const auto& entries = p.params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    V param = entries[k].second;
    const Index n = param.value().size();
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    if (!p.all_elements && n > opts.samples_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(static_cast<std::size_t>(opts.samples_per_param));
    }
    for (Index i : idx) {
      double& x = param.mutable_value().data()[i];
      const double x0 = x;
      auto at = [&](double d) {
        x = x0 + d;
        return evaluate(p);
      };
      std::vector<double> est;
      for (double h : opts.steps)
        est.push_back((-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h));
      x = x0;
      // Error estimate per step: disagreement with the next smaller step (truncation,
      // kinks) plus a roundoff bound that grows as the step shrinks.
      const double f0 = at(0.0);
      double num = est.front();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s + 1 < est.size(); ++s) {
        const double err = std::abs(est[s] - est[s + 1]) +
                           64 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) /
                               opts.steps[s];
        if (err < best) {
          best = err;
          num = est[s];
        }
      }
      const double ana = analytic[k].data()[i];
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), opts.floor});
      ++e.checked;
      if (e.worst_index < 0 || rel > e.max_rel_error) {
        e.max_rel_error = rel;
        e.worst_param = entries[k].first;
        e.worst_index = i;
        e.analytic = ana;
        e.numeric = num;
      }
    }
  }
  return e;
}

void perturb(ParamSet<double>& params, double sd, Rng& rng) {
  for (const auto& [name, v] : params.entries()) {
    V handle = v;
    handle.mutable_value() += randn(v.rows(), v.cols(), rng, sd);
  }
}

// Fixed random projection to a scalar so every output element carries gradient.
std::function<V(const V&)> projector(Rng& rng) {
  auto cache = std::make_shared<std::map<std::pair<Index, Index>, M>>();
  auto local = std::make_shared<Rng>(rng.next());
  return [cache, local](const V& x) {
    auto key = std::make_pair(x.rows(), x.cols());
    auto it = cache->find(key);
    if (it == cache->end()) it = cache->emplace(key, randn(x.rows(), x.cols(), *local)).first;
    return weighted_sum(x, it->second);
  };
}

using Builder = std::function<void(Problem&, Rng&)>;

std::map<std::string, Builder> primitive_builders() {
  std::map<std::string, Builder> b;
  auto two = [](Problem& p, Rng& rng, Index r, Index c) {
    return std::make_pair(p.params.add("a", randn(r, c, rng)), p.params.add("b", randn(r, c, rng)));
  };
  b["add"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 3, 4);
    auto proj = projector(rng);
    p.loss = [=] { return proj(add(a, c)); };
  };
  b["sub"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 3, 4);
    auto proj = projector(rng);
    p.loss = [=] { return proj(sub(a, c)); };
  };
  b["mul"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 3, 4);
    auto proj = projector(rng);
    p.loss = [=] { return proj(mul(a, c)); };
  };
  b["scale"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(scale(a, 1.7)); };
  };
  b["mul_scalar"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    V s = p.params.add("s", randn(1, 1, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(mul_scalar(a, s)); };
  };
  b["add_const"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    const M c = randn(3, 4, rng);
    auto proj = projector(rng);
    p.loss = [=] { return proj(add_const(a, c)); };
  };
  b["matmul"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    V c = p.params.add("b", randn(4, 5, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(matmul(a, c)); };
  };
  b["transpose"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(transpose(a)); };
  };
  b["linear"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(5, 4, rng));
    V w = p.params.add("w", randn(4, 3, rng));
    V c = p.params.add("b", randn(1, 3, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(linear(x, w, c)); };
  };
  b["relu"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 5, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(relu(a)); };
  };
  b["sigmoid"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 5, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(sigmoid(a)); };
  };
  b["logit"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randu(4, 5, 0.1, 0.9, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(logit(a)); };
  };
  b["clamp"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 5, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(clamp(a, -0.8, 0.9)); };
  };
  b["concat_cols"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 3, 2);
    auto proj = projector(rng);
    p.loss = [=] { return proj(concat_cols<double>({a, c, a})); };
  };
  b["concat_rows"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 2, 3);
    auto proj = projector(rng);
    p.loss = [=] { return proj(concat_rows<double>({c, a, c})); };
  };
  b["slice_cols"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 6, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(slice_cols(a, 2, 3)); };
  };
  b["gather_rows"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 3, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(gather_rows(a, {3, 0, 3, 1})); };
  };
  b["gather_elements"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 3, rng));
    IndexMatrix idx(2, 3);
    idx << 0, 4, -1, 8, 4, 2;
    auto proj = projector(rng);
    p.loss = [=] { return proj(gather_elements(a, idx)); };
  };
  b["broadcast_groups"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(2, 3, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(broadcast_groups(a, 3)); };
  };
  b["sum_all"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    p.loss = [=] { return mul(sum_all(a), sum_all(a)); };
  };
  b["mean_all"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    p.loss = [=] { return mul(mean_all(a), sum_all(a)); };
  };
  b["weighted_sum"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 4, rng));
    const M w = randn(3, 4, rng);
    p.loss = [=] { return weighted_sum(mul(a, a), w); };
  };
  b["linear_combination"] = [two](Problem& p, Rng& rng) {
    auto [a, c] = two(p, rng, 1, 1);
    p.loss = [=] { return linear_combination<double>({mul(a, c), a, c}, {0.5, -1.5, 2.0}); };
  };
  b["softmax_blocks"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(3, 6, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(softmax_blocks(a, 3)); };
  };
  b["layer_norm"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(4, 6, rng));
    V g = p.params.add("gain", randn(1, 6, rng));
    V c = p.params.add("bias", randn(1, 6, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(layer_norm(x, g, c)); };
  };
  b["normalize_rows"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 5, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(normalize_rows(a)); };
  };
  b["attention"] = [](Problem& p, Rng& rng) {
    V q = p.params.add("q", randn(2 * 3, 4, rng));
    V k = p.params.add("k", randn(2 * 5, 4, rng));
    V v = p.params.add("v", randn(2 * 5, 4, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(attention(q, k, v, 2, 2)); };
  };
  b["attention_pool"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(2 * 4, 3, rng));
    V l = p.params.add("logits", randn(2 * 4, 1, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(attention_pool(x, l, 2)); };
  };
  b["sample_1d"] = [](Problem& p, Rng& rng) {
    V seq = p.params.add("seq", randn(2 * 6, 3, rng));
    // Includes coordinates beyond both ends, which clamp.
    V coords = p.params.add("coords", randu(2 * 3, 2, -0.7, 5.6, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(sample_1d(seq, coords, 2)); };
  };
  b["deformable_aggregate"] = [](Problem& p, Rng& rng) {
    V values = p.params.add("values", randn(2 * 6, 4, rng));
    V loc = p.params.add("locations", randu(2 * 3, 4, 0.1, 4.9, rng));
    V w = p.params.add("weights", randn(2 * 3, 4, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(deformable_aggregate(values, loc, w, 2, 2, 2)); };
  };
  b["temporal_unfold"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(2 * 4, 3, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(temporal_unfold(x, 3, 2)); };
  };
  b["dropout"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(4, 5, rng));
    const std::uint64_t s = rng.next();
    auto proj = projector(rng);
    p.loss = [=] {
      Rng mask(s);
      return proj(dropout(x, 0.4, true, mask));
    };
  };
  b["drop_path"] = [](Problem& p, Rng& rng) {
    V x = p.params.add("x", randn(4 * 3, 2, rng));
    const std::uint64_t s = rng.next();
    auto proj = projector(rng);
    p.loss = [=] {
      Rng mask(s);
      return proj(drop_path(x, 0.4, true, mask, 4));
    };
  };
  b["cosine_rows"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(2 * 3, 4, rng));
    V c = p.params.add("b", randn(2, 4, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(cosine_rows(a, c)); };
  };
  b["info_nce_rows"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("logits", randn(3, 4, rng, 0.3));
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> valid(3, 4);
    valid << true, true, false, true, true, true, true, true, true, false, false, true;
    auto proj = projector(rng);
    p.loss = [=] { return proj(info_nce_rows(a, valid, 0.5)); };
  };
  b["focal_loss"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("p", randu(5, 1, 0.05, 0.95, rng));
    p.loss = [=] { return focal_loss(a, {true, false, false, true, false}, 0.25, 2.0); };
  };
  b["l1_rows_mean"] = [](Problem& p, Rng& rng) {
    V a = p.params.add("a", randn(4, 2, rng));
    const M t = randn(4, 2, rng);
    p.loss = [=] { return l1_rows_mean(a, t); };
  };
  b["iou_loss"] = [](Problem& p, Rng& rng) {
    // Overlapping and disjoint pairs, away from the max/min switching points.
    M pred(3, 2), target(3, 2);
    pred << 0.1, 0.5, 0.3, 0.9, 0.05, 0.2;
    target << 0.2, 0.6, 0.35, 0.7, 0.5, 0.8;
    V a = p.params.add("pred", pred + randn(3, 2, rng, 0.01));
    p.loss = [=] { return iou_loss(a, target); };
  };
  b["cw_to_moment"] = [](Problem& p, Rng& rng) {
    M r(3, 2);
    r << 0.5, 0.3, 0.2, 0.6, 0.8, 0.2;  // second row clamps at 0
    V a = p.params.add("refs", r + randn(3, 2, rng, 0.01));
    auto proj = projector(rng);
    p.loss = [=] { return proj(cw_to_moment(a)); };
  };
  return b;
}

struct ModuleInputs {
  V queries, refs, memory, video, text;
};

ModuleInputs module_inputs(Problem& p, const ModelConfig& cfg, const GradCheckOptions& o, Rng& rng) {
  ModuleInputs in;
  const Index g = o.groups;
  in.queries = p.params.add("input.queries", randn(g * cfg.queries, cfg.width, rng));
  M logits(g * cfg.queries, 2);
  for (Index r = 0; r < logits.rows(); ++r) {
    logits(r, 0) = rng.uniform(-1.0, 1.0);
    logits(r, 1) = rng.uniform(-2.0, -0.5);
  }
  const V ref_logits = p.params.add("input.ref_logits", logits);
  in.refs = sigmoid(ref_logits);
  in.memory = p.params.add("input.memory", randn(g * o.frames, cfg.width, rng));
  in.video = p.params.add("input.video", randn(g * o.frames, cfg.video_dim, rng));
  in.text = p.params.add("input.text", randn(g * o.tokens, cfg.text_dim, rng));
  return in;
}

std::map<std::string, std::function<void(Problem&, Rng&, const ModelConfig&, const GradCheckOptions&)>>
module_builders() {
  std::map<std::string, std::function<void(Problem&, Rng&, const ModelConfig&, const GradCheckOptions&)>> b;
  b["linear"] = [](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
    Linear<double> lin(p.params, "linear", cfg.width, cfg.width, Init::Xavier, rng);
    V x = p.params.add("input.x", randn(o.frames, cfg.width, rng));
    auto proj = projector(rng);
    p.loss = [=] { return proj(lin(x)); };
  };
  b["mha"] = [](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
    MultiHeadAttention<double> mha(p.params, "mha", cfg.width, cfg.heads, rng);
    const ModuleInputs in = module_inputs(p, cfg, o, rng);
    auto proj = projector(rng);
    const Index g = o.groups;
    p.loss = [=] { return proj(mha(in.queries, in.memory, in.memory, g)); };
  };
  auto deformable = [](bool rdsa) {
    return [rdsa](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
      DeformableAttention<double> att(p.params, rdsa ? "rdsa" : "deformable_ca", cfg.deformable(),
                                      rdsa, rng);
      const ModuleInputs in = module_inputs(p, cfg, o, rng);
      auto proj = projector(rng);
      const Index g = o.groups;
      p.loss = [=] {
        const auto r = att(in.queries, in.refs, in.memory, g);
        return add(proj(r.output), proj(r.locations));
      };
    };
  };
  b["deformable_ca"] = deformable(false);
  b["rdsa"] = deformable(true);
  b["standard_ca"] = [](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
    StandardCrossAttention<double> att(p.params, "standard_ca", cfg.width, cfg.heads, rng);
    const ModuleInputs in = module_inputs(p, cfg, o, rng);
    auto proj = projector(rng);
    const Index g = o.groups;
    p.loss = [=] { return proj(att(in.queries, in.refs, in.memory, g)); };
  };
  b["dense_stream"] = [](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
    DenseStream<double> ds(p.params, "dense", cfg.stream_dims(), rng);
    const ModuleInputs in = module_inputs(p, cfg, o, rng);
    V beta = p.params.add("input.beta", M::Constant(1, 1, 0.4));
    auto proj = projector(rng);
    const Index g = o.groups, tokens = o.tokens;
    p.loss = [=] {
      const auto [v, t] = ds.project_inputs(in.video, in.text);
      const V d = fuse_video(in.memory, v, beta);
      return proj(ds.refine(d, drop_cls(t, tokens), g, ForwardContext{}));
    };
  };
  b["sparse_stream"] = [](Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o) {
    SparseStream<double> ss(p.params, "sparse", cfg.stream_dims(), cfg.strategy, cfg.deformable(),
                            rng);
    const ModuleInputs in = module_inputs(p, cfg, o, rng);
    V text = p.params.add("input.text_proj", randn(o.groups * o.tokens, cfg.width, rng));
    auto proj = projector(rng);
    const Index g = o.groups, tokens = o.tokens;
    p.loss = [=] {
      const V h = ss.inject_text(in.queries, drop_cls(text, tokens), g, ForwardContext{});
      const auto r = ss.refine(h, in.refs, in.memory, g, ForwardContext{});
      V out = proj(r.queries);
      if (r.offsets.defined()) out = add(out, proj(r.offsets));
      return out;
    };
  };
  return b;
}

void total_loss_problem(Problem& p, Rng& rng, const ModelConfig& cfg, const GradCheckOptions& o,
                        std::uint64_t seed) {
  auto model = std::make_shared<SdstModel<double>>(cfg, seed);
  // Copies share nodes, so perturbing p.params moves the model.
  p.params = model->params();
  ModelInput<double> input;
  input.groups = o.groups;
  input.frames = o.frames;
  input.tokens = o.tokens;
  for (Index l = 0; l < cfg.levels; ++l)
    input.levels.push_back({randn(o.groups * o.frames, cfg.video_dim, rng),
                            randn(o.groups * o.tokens, cfg.text_dim, rng)});
  std::vector<SampleTargets> targets;
  const double t1 = static_cast<double>(o.frames - 1);
  for (Index g = 0; g < o.groups; ++g) {
    std::vector<Moment> ms;
    if (g % 2 == 0) {
      ms.push_back({2 / t1, 4 / t1});
    } else {
      ms.push_back({0.0, 1 / t1});
      ms.push_back({5 / t1, 7 / t1});
    }
    targets.push_back({ms, rasterize_moments(ms, o.frames)});
  }
  auto decisions = std::make_shared<LossDecisions>();
  const LossSettings settings;
  p.loss = [=] {
    const auto preds = model->forward(input, ForwardContext{});
    return compute_losses(preds, targets, settings, decisions.get()).total;
  };
}

}  // namespace

std::vector<std::string> grad_check_primitives() {
  std::vector<std::string> out;
  for (const auto& [name, b] : primitive_builders()) out.push_back(name);
  return out;
}

std::vector<std::string> grad_check_modules() {
  return {"linear", "mha", "deformable_ca", "rdsa", "standard_ca", "dense_stream", "sparse_stream",
          "total_loss"};
}

ModelConfig grad_check_config() {
  ModelConfig c;
  c.width = 16;
  c.levels = 2;
  c.queries = 3;
  c.heads = 2;
  c.ffn_ratio = 2;
  c.video_dim = 12;
  c.text_dim = 12;
  c.deform_heads = 2;
  c.points = 2;
  c.latent = 8;
  c.context_hidden = 8;
  c.roi_size = 4;
  c.dropout = 0.0;
  c.drop_path = 0.0;
  return c;
}

GradCheckReport grad_check(const ModelConfig& cfg, const std::string& selector, std::uint64_t seed,
                           const GradCheckOptions& opts) {
  if (cfg.width > 32 || opts.frames > 16) throw Error("grad-check-too-large");
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::string> targets;
  if (selector == "all" || selector == "primitives")
    for (const auto& n : grad_check_primitives()) targets.push_back("primitive:" + n);
  if (selector == "all")
    for (const auto& n : grad_check_modules()) targets.push_back(n);
  if (targets.empty()) targets.push_back(selector);

  const auto prims = primitive_builders();
  const auto modules = module_builders();
  GradCheckReport report;
  std::uint64_t k = 0;
  for (const auto& target : targets) {
    Rng rng(seed * 1000003ULL + k++);
    Problem p;
    if (target.rfind("primitive:", 0) == 0) {
      auto it = prims.find(target.substr(10));
      if (it == prims.end()) throw Error("unknown-grad-check-target: " + target);
      it->second(p, rng);
      p.all_elements = true;
    } else if (target == "total_loss") {
      total_loss_problem(p, rng, cfg, opts, seed);
      perturb(p.params, opts.perturb_std, rng);
    } else {
      auto it = modules.find(target);
      if (it == modules.end()) throw Error("unknown-grad-check-target: " + target);
      it->second(p, rng, cfg, opts);
      perturb(p.params, opts.perturb_std, rng);
    }
    GradCheckEntry e = run_problem(target, p, rng, opts);
    if (e.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = e.max_rel_error;
      report.worst = e.target + "/" + e.worst_param + "[" + std::to_string(e.worst_index) + "]";
    }
    report.entries.push_back(std::move(e));
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace sdst
