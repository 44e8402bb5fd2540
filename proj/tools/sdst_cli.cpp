#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "sdst/config.hpp"
#include "sdst/grad_check.hpp"
#include "sdst/train.hpp"

namespace fs = std::filesystem;
using namespace sdst;

namespace {

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "key-value config file");
    app->add_option("-s,--set", overrides, "override, e.g. optim.lr=3e-4")->take_all();
  }

  KeyValues resolve() const {
    KeyValues kv = file.empty() ? KeyValues{} : KeyValues::load(file);
    for (const auto& o : overrides) kv.apply_override(o);
    return kv;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot-open: " + path.string());
  os << text;
}

Dataset load_for(const RunConfig& cfg, const std::string& dir) {
  Dataset d = load_dataset(dir, cfg.pooling);
  if (d.video_dim != cfg.model.video_dim || d.text_dim != cfg.model.text_dim ||
      d.levels != cfg.model.levels)
    throw Error("config-mismatch: dataset " + dir);
  return d;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense and sparse stream moment retrieval"};
  app.require_subcommand(1);

  ConfigArgs synth_args, train_args, grad_args, count_args;
  std::string synth_out, train_out;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  synth_args.attach(gen);
  gen->add_option("-o,--out", synth_out, "dataset directory (synth.output_dir)");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_args.attach(train_cmd);
  train_cmd->add_option("-o,--out", train_out, "run directory (run.output_dir)");

  std::string ckpt_path, data_dir, report_dir;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt_path)->required();
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("-o,--out", report_dir, "report directory");

  std::string target = "all";
  std::uint64_t grad_seed = 0;
  double tolerance = 1e-3;
  auto* grad_cmd = app.add_subcommand("grad-check", "compare analytic and numeric gradients");
  grad_args.attach(grad_cmd);
  grad_cmd->add_option("-t,--target", target,
                       "all | primitives | primitive:<name> | linear | mha | deformable_ca | "
                       "rdsa | standard_ca | dense_stream | sparse_stream | total_loss");
  grad_cmd->add_option("--seed", grad_seed);
  grad_cmd->add_option("--tolerance", tolerance);

  std::string offsets_ckpt, offsets_data, offsets_out = "offsets.csv";
  auto* offsets_cmd = app.add_subcommand("inspect-offsets", "weighted offsets per level and head");
  offsets_cmd->add_option("--checkpoint", offsets_ckpt)->required();
  offsets_cmd->add_option("--data", offsets_data)->required();
  offsets_cmd->add_option("-o,--out", offsets_out, "trace file");

  auto* count_cmd = app.add_subcommand("param-count", "trainable parameter count");
  count_args.attach(count_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      KeyValues kv = synth_args.resolve();
      if (!synth_out.empty()) kv.set("synth.output_dir", synth_out);
      const SynthRun run = SynthRun::from(kv);
      if (run.output_dir.empty()) throw Error("missing-config-key: synth.output_dir");
      const std::string dir = resolve_output(run.output_dir);
      write_dataset(dir, synth_generate(run.config, run.seed));
      write_text(fs::path(dir) / "synth.ini", run.to_text());
      std::cout << "wrote " << run.config.num_samples << " samples to " << dir << '\n';
    } else if (train_cmd->parsed()) {
      KeyValues kv = train_args.resolve();
      if (!train_out.empty()) kv.set("run.output_dir", train_out);
      const RunConfig cfg = RunConfig::from(kv);
      cfg.validate();
      if (cfg.train_dir.empty()) throw Error("missing-config-key: data.train_dir");
      if (cfg.output_dir.empty()) throw Error("missing-config-key: run.output_dir");
      const Dataset train_set = load_for(cfg, cfg.train_dir);
      Dataset eval_set;
      if (!cfg.eval_dir.empty()) eval_set = load_for(cfg, cfg.eval_dir);
      const std::string out = resolve_output(cfg.output_dir);
      const TrainSummary s =
          train(cfg, train_set, cfg.eval_dir.empty() ? nullptr : &eval_set, out, &std::cout);
      std::cout << "steps " << s.steps << " epochs " << s.epochs << " best mAP " << s.best_score
                << '\n'
                << "final " << s.final_checkpoint << '\n'
                << "best " << s.best_checkpoint << '\n';
    } else if (eval_cmd->parsed()) {
      RunConfig cfg;
      const SdstModel<float> model = model_from_checkpoint(load_checkpoint(ckpt_path), &cfg);
      const Dataset data = load_for(cfg, data_dir);
      const MetricReport rep = evaluate(model, data, cfg.optim.batch_size, cfg.nms);
      std::cout << rep.to_text();
      if (!report_dir.empty()) {
        const std::string dir = resolve_output(report_dir);
        rep.write(dir, "metrics");
        write_text(fs::path(dir) / "config.ini", cfg.to_text());
      }
    } else if (grad_cmd->parsed()) {
      RunConfig base;
      base.model = grad_check_config();
      const RunConfig cfg = RunConfig::from(grad_args.resolve(), base);
      const GradCheckReport rep = grad_check(cfg.model, target, grad_seed);
      std::cout << std::left << std::setw(34) << "target" << std::setw(14) << "max_rel_err"
                << "worst\n";
      for (const auto& e : rep.entries)
        std::cout << std::setw(34) << e.target << std::setw(14) << std::setprecision(3)
                  << std::scientific << e.max_rel_error << std::defaultfloat << e.worst_param
                  << '[' << e.worst_index << "] analytic " << e.analytic << " numeric "
                  << e.numeric << '\n';
      std::cout << "max " << std::scientific << rep.max_rel_error << std::defaultfloat << " at "
                << rep.worst << " in " << std::fixed << std::setprecision(1) << rep.seconds
                << " s\n";
      return rep.max_rel_error < tolerance ? 0 : 1;
    } else if (offsets_cmd->parsed()) {
      RunConfig cfg;
      const SdstModel<float> model = model_from_checkpoint(load_checkpoint(offsets_ckpt), &cfg);
      const Dataset data = load_for(cfg, offsets_data);
      const OffsetSummary s = inspect_offsets(model, data, cfg.optim.batch_size);
      write_offset_trace(resolve_output(offsets_out), s);
      for (std::size_t l = 0; l < s.means.size(); ++l) {
        std::cout << "level " << l << ':';
        for (double v : s.means[l]) std::cout << ' ' << v;
        std::cout << '\n';
      }
      std::cout << "beyond_boundaries " << (s.beyond_boundaries ? "yes" : "no") << '\n';
    } else if (count_cmd->parsed()) {
      const RunConfig cfg = RunConfig::from(count_args.resolve());
      const ParamCount pc = count_parameters(cfg.model);
      for (const auto& [name, n] : pc.by_module) std::cout << name << ' ' << n << '\n';
      std::cout << "total " << pc.total << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
