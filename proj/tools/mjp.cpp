// mjp: command-line front end for the pruning pipeline.
//
//   mjp gen     --out data --scenes 50
//   mjp train   --stage task|cons|joint|finetune --data data --out run
//   mjp predict --data data --out run [--ratio r]
//   mjp prune   --data data --out run
//   mjp eval    --data data --out run
//   mjp bench   --data data --out run
//   mjp viz     --out run [--report path]
//
// Failures print one line "error kind=<kind> message=<text>" on stderr and
// exit with 2 (usage), 3 (missing prerequisite), 4 (bad data) or 5 (divergence).

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mjp/mjp.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool paper_grid = false;
  std::string out = "run";
  std::string data = "data";
  std::optional<double> alpha, beta, gamma, lambda, ratio, theta, lr, head_lr;
  std::optional<int> epochs;
  std::optional<std::string> sparsity;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "JSON run configuration");
  sub->add_option("--seed", o.seed, "base seed (MJP_SEED overrides)");
  sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  sub->add_flag("--paper-grid", o.paper_grid, "use the full-size grid");
  sub->add_option("--out", o.out, "output directory");
}

void add_train_overrides(CLI::App* sub, Options& o) {
  sub->add_option("--alpha", o.alpha, "consistency weight");
  sub->add_option("--beta", o.beta, "sparsity weight");
  sub->add_option("--gamma", o.gamma, "penalty weight");
  sub->add_option("--lambda", o.lambda, "penalty multiplier");
  sub->add_option("--theta", o.theta, "mask threshold");
  sub->add_option("--lr", o.lr, "predictor learning rate");
  sub->add_option("--head-lr", o.head_lr, "task head learning rate");
  sub->add_option("--epochs", o.epochs, "epochs per stage");
  sub->add_option("--sparsity", o.sparsity, "straight_through or soft");
}

// defaults <- --config <- flags <- MJP_SEED
mjp::RunConfig resolve(const Options& o) {
  mjp::RunConfig cfg;
  if (o.paper_grid) cfg.grid = mjp::GridConfig::paper();
  if (!o.config_path.empty()) cfg = mjp::config_from_json(mjp::detail::read_json(o.config_path), cfg);
  if (o.paper_grid) cfg.grid = mjp::GridConfig::paper();
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) cfg.jobs = *o.jobs;
  auto& t = cfg.train;
  if (o.alpha) t.alpha = *o.alpha;
  if (o.beta) t.beta = *o.beta;
  if (o.gamma) t.gamma = *o.gamma;
  if (o.lambda) t.lambda = *o.lambda;
  if (o.ratio) t.ratio = *o.ratio;
  if (o.theta) t.theta = *o.theta;
  if (o.lr) t.learning_rate = *o.lr;
  if (o.head_lr) t.head_learning_rate = *o.head_lr;
  if (o.epochs) t.epochs = *o.epochs;
  if (o.sparsity) t.sparsity = mjp::sparsity_mode_from_string(*o.sparsity);
  if (const auto s = mjp::env_seed()) cfg.seed = *s;
  cfg.validate();
  return cfg;
}

void save_config(const mjp::RunConfig& cfg, const std::filesystem::path& dir) {
  mjp::detail::ensure_dir(dir);
  mjp::detail::write_json(dir / "config.json", mjp::config_to_json(cfg));
}

int fail(const std::string& kind, int code, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat)
    if (ch == '\n') ch = ' ';
  std::cerr << "error kind=" << kind << " message=" << flat << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Content-aware multi-modal joint input pruning"};
  app.require_subcommand(1);
  Options o;
  std::size_t scenes = 50;
  std::string stage;
  std::string report;

  auto* gen = app.add_subcommand("gen", "generate synthetic scenes into --out");
  add_common(gen, o);
  gen->add_option("--scenes", scenes, "number of scenes");

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, o);
  add_train_overrides(train, o);
  train->add_option("--data", o.data, "scene directory");
  train->add_option("--ratio", o.ratio, "target prune ratio");
  train->add_option("--stage", stage, "task, cons, joint or finetune")
      ->required()
      ->check(CLI::IsMember({"task", "cons", "joint", "finetune"}));

  auto* predict = app.add_subcommand("predict", "write per-scene masks from the trained predictor");
  add_common(predict, o);
  predict->add_option("--data", o.data, "scene directory");
  predict->add_option("--ratio", o.ratio, "top-k prune ratio (default: threshold at theta)");

  auto* prune = app.add_subcommand("prune", "apply masks to the scenes");
  add_common(prune, o);
  prune->add_option("--data", o.data, "scene directory");

  auto* eval = app.add_subcommand("eval", "score the finetuned head on pruned inputs");
  add_common(eval, o);
  add_train_overrides(eval, o);
  eval->add_option("--data", o.data, "scene directory");

  auto* bench = app.add_subcommand("bench", "ratio sweep against the random baseline");
  add_common(bench, o);
  add_train_overrides(bench, o);
  bench->add_option("--data", o.data, "scene directory");

  auto* viz = app.add_subcommand("viz", "plot a sweep report");
  add_common(viz, o);
  viz->add_option("--report", report, "report.json (default: <out>/bench/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    const mjp::RunConfig cfg = resolve(o);
    const std::filesystem::path out = o.out;
    if (*gen) {
      mjp::run_gen(cfg, scenes, out);
      save_config(cfg, out);
    } else if (*train) {
      if (stage == "task") {
        mjp::run_train_task(cfg, o.data, out);
        save_config(cfg, out / "stage1");
      } else if (stage == "cons") {
        mjp::run_train_cons(cfg, o.data, out);
        save_config(cfg, out / "stage2");
      } else if (stage == "joint") {
        mjp::run_train_joint(cfg, o.data, out);
        save_config(cfg, out / "stage3");
      } else {
        mjp::run_train_finetune(cfg, o.data, out);
        save_config(cfg, out / "stage4");
      }
    } else if (*predict) {
      mjp::run_predict(cfg, o.data, out, o.ratio);
    } else if (*prune) {
      mjp::run_prune(cfg, o.data, out);
    } else if (*eval) {
      std::cout << mjp::run_eval(cfg, o.data, out).dump(2) << "\n";
    } else if (*bench) {
      mjp::run_bench(cfg, o.data, out);
      save_config(cfg, out / "bench");
    } else if (*viz) {
      mjp::run_viz(report.empty() ? out / "bench" / "report.json" : std::filesystem::path(report), out / "viz");
    }
  } catch (const mjp::Error& e) {
    return fail(mjp::to_string(e.kind()), static_cast<int>(e.kind()), e.what());
  } catch (const std::invalid_argument& e) {
    return fail("usage", 2, e.what());
  } catch (const std::exception& e) {
    return fail("data", 4, e.what());
  }
  return 0;
}
