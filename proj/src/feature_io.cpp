#include "sdst/feature_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sdst/numerics/rng.hpp"

namespace sdst {

namespace fs = std::filesystem;

namespace {

constexpr char kFeatureMagic[8] = {'S', 'D', 'S', 'T', 'F', 'E', 'A', 'T'};
constexpr char kPoolerMagic[8] = {'S', 'D', 'S', 'T', 'P', 'O', 'O', 'L'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_floats(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const float v = to_little(data[i]);
      os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("truncated-file");
  return to_little(v);
}

void get_floats(std::istream& is, float* data, std::size_t n) {
  if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float))))
    throw Error("truncated-file");
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; ++i) data[i] = to_little(data[i]);
}

void check_magic(std::istream& is, const char (&magic)[8]) {
  char buf[8];
  if (!is.read(buf, 8)) throw Error("truncated-file");
  if (std::memcmp(buf, magic, 8) != 0) throw Error("bad-magic");
}

}  // namespace

void RawLevelFeatures::validate() const {
  if (levels == 0 || frames == 0 || tokens_v == 0 || video_dim == 0 || tokens == 0 || text_dim == 0)
    throw Error("invalid-features: empty dimension");
  if (video.size() != levels || text.size() != levels) throw Error("invalid-features: level count");
  for (std::uint32_t l = 0; l < levels; ++l) {
    if (video[l].rows() != static_cast<Index>(frames) * tokens_v || video[l].cols() != video_dim)
      throw Error("invalid-features: video shape");
    if (text[l].rows() != tokens || text[l].cols() != text_dim)
      throw Error("invalid-features: text shape");
  }
}

std::string to_string(PoolStrategy p) {
  switch (p) {
    case PoolStrategy::Cls: return "cls";
    case PoolStrategy::Avg: return "avg";
    case PoolStrategy::Adaptive: return "adaptive";
  }
  return "unknown";
}

PoolStrategy parse_pool_strategy(const std::string& name) {
  if (name == "cls") return PoolStrategy::Cls;
  if (name == "avg") return PoolStrategy::Avg;
  if (name == "adaptive") return PoolStrategy::Adaptive;
  throw Error("unknown-pool-strategy: " + name);
}

Eigen::VectorXd FrozenPooler::weights(const MatrixF& tokens) const {
  if (tokens.cols() != dim()) throw Error("shape-mismatch: pooler width");
  Eigen::VectorXd logits(tokens.rows());
  for (Index j = 0; j < tokens.rows(); ++j) {
    double s = 0.0;
    for (Index c = 0; c < tokens.cols(); ++c)
      s += static_cast<double>(tokens(j, c)) * static_cast<double>(query_[static_cast<std::size_t>(c)]);
    logits(j) = s;
  }
  const double mx = logits.maxCoeff();
  Eigen::VectorXd w = (logits.array() - mx).exp().matrix();
  return w / w.sum();
}

std::uint64_t FrozenPooler::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (float f : query_) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xFFu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void FrozenPooler::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot-open: " + path);
  os.write(kPoolerMagic, 8);
  put_u32(os, kFeatureVersion);
  put_u32(os, static_cast<std::uint32_t>(query_.size()));
  put_floats(os, query_.data(), query_.size());
}

FrozenPooler FrozenPooler::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot-open: " + path);
  check_magic(is, kPoolerMagic);
  if (get_u32(is) != kFeatureVersion) throw Error("unsupported-version");
  std::vector<float> q(get_u32(is));
  get_floats(is, q.data(), q.size());
  return FrozenPooler(std::move(q));
}

MatrixF pool_level(const MatrixF& raw, Index tokens_v, PoolStrategy strategy,
                   const FrozenPooler& pooler) {
  if (tokens_v < 1 || raw.rows() % tokens_v != 0) throw Error("shape-mismatch: pool_level");
  const Index frames = raw.rows() / tokens_v;
  MatrixF out(frames, raw.cols());
  for (Index t = 0; t < frames; ++t) {
    const auto tokens = raw.middleRows(t * tokens_v, tokens_v);
    switch (strategy) {
      case PoolStrategy::Cls: out.row(t) = tokens.row(0); break;
      case PoolStrategy::Avg: out.row(t) = tokens.colwise().mean(); break;
      case PoolStrategy::Adaptive: {
        const Eigen::VectorXd w = pooler.weights(tokens);
        out.row(t) = (w.transpose() * tokens.cast<double>()).cast<float>();
        break;
      }
    }
  }
  return out;
}

void write_features(const std::string& path, const RawLevelFeatures& f) {
  f.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot-open: " + path);
  os.write(kFeatureMagic, 8);
  put_u32(os, kFeatureVersion);
  for (std::uint32_t v : {f.levels, f.frames, f.tokens_v, f.video_dim, f.tokens, f.text_dim})
    put_u32(os, v);
  for (const auto& m : f.video) put_floats(os, m.data(), static_cast<std::size_t>(m.size()));
  for (const auto& m : f.text) put_floats(os, m.data(), static_cast<std::size_t>(m.size()));
  if (!os) throw Error("write-failed: " + path);
}

RawLevelFeatures read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot-open: " + path);
  check_magic(is, kFeatureMagic);
  if (get_u32(is) != kFeatureVersion) throw Error("unsupported-version");
  RawLevelFeatures f;
  f.levels = get_u32(is);
  f.frames = get_u32(is);
  f.tokens_v = get_u32(is);
  f.video_dim = get_u32(is);
  f.tokens = get_u32(is);
  f.text_dim = get_u32(is);
  for (std::uint32_t l = 0; l < f.levels; ++l) {
    MatrixF m(static_cast<Index>(f.frames) * f.tokens_v, f.video_dim);
    get_floats(is, m.data(), static_cast<std::size_t>(m.size()));
    f.video.push_back(std::move(m));
  }
  for (std::uint32_t l = 0; l < f.levels; ++l) {
    MatrixF m(f.tokens, f.text_dim);
    get_floats(is, m.data(), static_cast<std::size_t>(m.size()));
    f.text.push_back(std::move(m));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error("trailing-bytes");
  f.validate();
  return f;
}

void write_annotations(const std::string& path, const std::vector<Annotation>& anns) {
  std::ofstream os(path);
  if (!os) throw Error("cannot-open: " + path);
  for (const auto& a : anns) {
    nlohmann::json j;
    j["id"] = a.id;
    j["duration"] = a.duration;
    j["query_id"] = a.query_id;
    j["moments"] = nlohmann::json::array();
    for (const auto& m : a.moments) j["moments"].push_back({m.start, m.end});
    std::vector<int> pos;
    for (bool p : a.positives) pos.push_back(p ? 1 : 0);
    j["positives"] = pos;
    os << j.dump() << '\n';
  }
}

std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot-open: " + path);
  std::vector<Annotation> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Annotation a;
    a.id = j.at("id").get<std::string>();
    a.duration = j.at("duration").get<double>();
    a.query_id = j.value("query_id", std::string());
    for (const auto& m : j.at("moments")) {
      Moment mm{m.at(0).get<double>(), m.at(1).get<double>()};
      if (!(0.0 <= mm.start && mm.start <= mm.end && mm.end <= 1.0)) throw Error("invalid-moment");
      a.moments.push_back(mm);
    }
    for (const auto& p : j.at("positives")) a.positives.push_back(p.get<int>() != 0);
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<bool> rasterize_moments(const std::vector<Moment>& moments, Index frames) {
  std::vector<bool> out(static_cast<std::size_t>(frames), false);
  for (Index t = 0; t < frames; ++t) {
    const double x = frames > 1 ? static_cast<double>(t) / static_cast<double>(frames - 1) : 0.0;
    for (const auto& m : moments)
      if (x >= m.start - 1e-9 && x <= m.end + 1e-9) out[static_cast<std::size_t>(t)] = true;
  }
  return out;
}

namespace {

Eigen::VectorXd random_unit(Index n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v / v.norm();
}

Eigen::MatrixXd random_map(Index rows, Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cols));
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

struct SynthWorld {
  Eigen::VectorXd marker;
  std::vector<Eigen::VectorXd> marker_dir;  // per level
  std::vector<Eigen::MatrixXd> video_map;   // F_v x concept
  std::vector<Eigen::MatrixXd> text_map;    // F_t x concept
  std::vector<double> alignment;            // share of the query concept per level
};

SynthWorld make_world(const SynthConfig& cfg) {
  Rng rng(cfg.world_seed);
  SynthWorld w;
  w.marker = random_unit(cfg.video_dim, rng);
  Eigen::VectorXd shift = random_unit(cfg.video_dim, rng);
  shift -= shift.dot(w.marker) * w.marker;
  shift.normalize();
  for (int l = 0; l < cfg.levels; ++l) {
    const double depth = cfg.levels > 1 ? static_cast<double>(l) / (cfg.levels - 1) : 1.0;
    // Shallow levels: marker partly rotated away from the pooler's query direction.
    w.marker_dir.push_back((w.marker + (1.0 - depth) * shift).normalized());
    w.alignment.push_back(0.5 + 0.5 * depth);
    w.video_map.push_back(random_map(cfg.video_dim, cfg.concept_dim, rng));
    w.text_map.push_back(random_map(cfg.text_dim, cfg.concept_dim, rng));
  }
  return w;
}

std::vector<Moment> draw_moments(const SynthConfig& cfg, Rng& rng) {
  const int frames = cfg.frames;
  for (int attempt = 0; attempt < 50; ++attempt) {
    const int count = static_cast<int>(rng.integer(cfg.min_moments, cfg.max_moments));
    std::vector<std::pair<int, int>> spans;
    bool ok = true;
    for (int k = 0; k < count && ok; ++k) {
      bool placed = false;
      for (int tries = 0; tries < 100 && !placed; ++tries) {
        const int len = static_cast<int>(rng.integer(cfg.min_length, std::min(cfg.max_length, frames)));
        const int a = static_cast<int>(rng.integer(0, frames - len));
        const int b = a + len - 1;
        bool clash = false;
        for (const auto& [s, e] : spans)
          if (!(b + 1 < s || a > e + 1)) clash = true;  // keep at least one frame between
        if (!clash) {
          spans.emplace_back(a, b);
          placed = true;
        }
      }
      ok = placed;
    }
    if (!ok) continue;
    std::sort(spans.begin(), spans.end());
    std::vector<Moment> out;
    for (const auto& [a, b] : spans)
      out.push_back({static_cast<double>(a) / (frames - 1), static_cast<double>(b) / (frames - 1)});
    return out;
  }
  throw Error("infeasible-moment-packing");
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_samples < 0 || cfg.frames < 2 || cfg.tokens_v < 2 || cfg.video_dim < 1 ||
      cfg.text_dim < 1 || cfg.tokens < 2 || cfg.levels < 1 || cfg.concept_dim < 1 ||
      cfg.min_moments < 1 || cfg.max_moments < cfg.min_moments || cfg.min_length < 2 ||
      cfg.max_length < cfg.min_length || cfg.noise < 0.0)
    throw Error("invalid-synth-config");
  const SynthWorld world = make_world(cfg);
  SynthDataset ds;
  std::vector<float> q(static_cast<std::size_t>(cfg.video_dim));
  for (Index c = 0; c < cfg.video_dim; ++c)
    q[static_cast<std::size_t>(c)] = static_cast<float>(cfg.pooler_gain * world.marker(c));
  ds.pooler = FrozenPooler(std::move(q));

  Rng rng(seed);
  const Index fv = cfg.video_dim, ft = cfg.text_dim, ce = cfg.concept_dim;
  for (int i = 0; i < cfg.num_samples; ++i) {
    Annotation ann;
    char id[32];
    std::snprintf(id, sizeof id, "s%05d", i);
    ann.id = id;
    ann.query_id = "q" + std::string(id + 1);
    ann.duration = cfg.frames;
    ann.moments = draw_moments(cfg, rng);
    ann.positives = rasterize_moments(ann.moments, cfg.frames);
    const Eigen::VectorXd query = random_unit(ce, rng);

    RawLevelFeatures f;
    f.levels = static_cast<std::uint32_t>(cfg.levels);
    f.frames = static_cast<std::uint32_t>(cfg.frames);
    f.tokens_v = static_cast<std::uint32_t>(cfg.tokens_v);
    f.video_dim = static_cast<std::uint32_t>(fv);
    f.tokens = static_cast<std::uint32_t>(cfg.tokens);
    f.text_dim = static_cast<std::uint32_t>(ft);

    // Per-frame background concepts are shared across levels so levels describe the
    // same video; per-level mixing decides how query-aligned each level is.
    std::vector<Eigen::VectorXd> background, distractor, residual;
    for (int t = 0; t < cfg.frames; ++t) {
      background.push_back(random_unit(ce, rng));
      residual.push_back(random_unit(ce, rng));
      for (int j = 2; j < cfg.tokens_v; ++j) distractor.push_back(random_unit(ce, rng));
    }
    std::vector<Eigen::VectorXd> text_jitter;
    for (int k = 0; k < cfg.tokens; ++k) text_jitter.push_back(random_unit(ce, rng));

    for (int l = 0; l < cfg.levels; ++l) {
      const double a = world.alignment[static_cast<std::size_t>(l)];
      const double b = std::sqrt(std::max(0.0, 1.0 - a * a));
      MatrixF video(static_cast<Index>(cfg.frames) * cfg.tokens_v, fv);
      for (int t = 0; t < cfg.frames; ++t) {
        const Eigen::VectorXd inside = a * query + b * residual[static_cast<std::size_t>(t)];
        const Eigen::VectorXd& content = ann.positives[static_cast<std::size_t>(t)]
                                             ? inside
                                             : background[static_cast<std::size_t>(t)];
        for (int j = 0; j < cfg.tokens_v; ++j) {
          Eigen::VectorXd v = Eigen::VectorXd::Zero(fv);
          if (j == 1) {
            v = cfg.marker * world.marker_dir[static_cast<std::size_t>(l)] +
                world.video_map[static_cast<std::size_t>(l)] * content;
          } else if (j >= 2) {
            v = 0.5 * world.video_map[static_cast<std::size_t>(l)] *
                distractor[static_cast<std::size_t>(t * (cfg.tokens_v - 2) + (j - 2))];
          }
          for (Index c = 0; c < fv; ++c)
            video(static_cast<Index>(t) * cfg.tokens_v + j, c) =
                static_cast<float>(v(c) + (cfg.noise > 0.0 ? rng.normal(0.0, cfg.noise) : 0.0));
        }
      }
      MatrixF text(cfg.tokens, ft);
      for (int k = 0; k < cfg.tokens; ++k) {
        const Eigen::VectorXd concept_vec = query + 0.3 * text_jitter[static_cast<std::size_t>(k)];
        const Eigen::VectorXd v = world.text_map[static_cast<std::size_t>(l)] * concept_vec;
        for (Index c = 0; c < ft; ++c)
          text(k, c) = static_cast<float>(v(c) + (cfg.noise > 0.0 ? rng.normal(0.0, cfg.noise) : 0.0));
      }
      f.video.push_back(std::move(video));
      f.text.push_back(std::move(text));
    }
    ds.features.push_back(std::move(f));
    ds.annotations.push_back(std::move(ann));
  }
  return ds;
}

void write_dataset(const std::string& dir, const SynthDataset& ds) {
  fs::create_directories(fs::path(dir) / "features");
  write_annotations((fs::path(dir) / "annotations.jsonl").string(), ds.annotations);
  ds.pooler.save((fs::path(dir) / "pooler.bin").string());
  for (std::size_t i = 0; i < ds.features.size(); ++i)
    write_features((fs::path(dir) / "features" / (ds.annotations[i].id + ".sdf")).string(),
                   ds.features[i]);
}

namespace {

PooledSample pool_sample(const RawLevelFeatures& f, const Annotation& a, PoolStrategy strategy,
                         const FrozenPooler& pooler) {
  PooledSample s;
  s.id = a.id;
  s.moments = a.moments;
  s.positives = a.positives;
  if (s.positives.size() != f.frames) throw Error("shape-mismatch: positives length");
  for (std::uint32_t l = 0; l < f.levels; ++l) {
    s.video.push_back(pool_level(f.video[l], f.tokens_v, strategy, pooler));
    s.text.push_back(f.text[l]);
  }
  return s;
}

void append(Dataset& d, PooledSample s, const RawLevelFeatures& f) {
  if (d.samples.empty()) {
    d.levels = f.levels;
    d.frames = f.frames;
    d.tokens = f.tokens;
    d.video_dim = f.video_dim;
    d.text_dim = f.text_dim;
  } else if (d.levels != f.levels || d.frames != f.frames || d.tokens != f.tokens ||
             d.video_dim != f.video_dim || d.text_dim != f.text_dim) {
    throw Error("inconsistent-dataset-shapes");
  }
  d.samples.push_back(std::move(s));
}

}  // namespace

Dataset pool_dataset(const SynthDataset& ds, PoolStrategy strategy) {
  Dataset d;
  for (std::size_t i = 0; i < ds.features.size(); ++i)
    append(d, pool_sample(ds.features[i], ds.annotations[i], strategy, ds.pooler), ds.features[i]);
  return d;
}

Dataset load_dataset(const std::string& dir, PoolStrategy strategy) {
  const auto anns = read_annotations((fs::path(dir) / "annotations.jsonl").string());
  if (anns.empty()) throw Error("empty-dataset");
  const FrozenPooler pooler = FrozenPooler::load((fs::path(dir) / "pooler.bin").string());
  Dataset d;
  for (const auto& a : anns) {
    const auto f = read_features((fs::path(dir) / "features" / (a.id + ".sdf")).string());
    append(d, pool_sample(f, a, strategy, pooler), f);
  }
  return d;
}

}  // namespace sdst
