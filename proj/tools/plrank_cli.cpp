// plrank: data generation, training, evaluation and probes from one JSON config.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "plrank/eval_probe.hpp"
#include "plrank/run_config.hpp"
#include "plrank/synth_world.hpp"
#include "plrank/training.hpp"

namespace fs = std::filesystem;
using namespace plrank;

namespace {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("PLRANK_LOG");
  if (env == nullptr) return LogLevel::kInfo;
  const std::string v = env;
  if (v == "error") return LogLevel::kError;
  if (v == "debug") return LogLevel::kDebug;
  if (v == "info" || v.empty()) return LogLevel::kInfo;
  throw ConfigError("PLRANK_LOG must be one of error, info, debug");
}

void log(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << msg << '\n';
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  std::string stage = "sft";
  std::string init;
  std::string checkpoint;
  std::string split = "test";
  std::string scorer = "policy";
  std::string probe_kind;
  bool wallclock = false;
};

class Run {
 public:
  explicit Run(const Options& opt) : opt_(opt), cfg_(load_run_config(opt.config_path)) {
    if (opt.seed) cfg_.seed = *opt.seed;
    if (opt.workers) cfg_.train.workers = *opt.workers;
    cfg_.finalize();
    meta_ = {cfg_.hash(), cfg_.seed};
    log(LogLevel::kDebug, "config_hash=" + meta_.config_hash + " seed=" + std::to_string(meta_.seed));
  }

  const RunConfig& cfg() const { return cfg_; }
  const ArtifactMeta& meta() const { return meta_; }

  fs::path dir(const std::string& configured) const {
    fs::path p(configured);
    if (p.is_relative() && !opt_.out.empty()) p = fs::path(opt_.out) / p;
    return p;
  }
  fs::path data_dir() const { return dir(cfg_.data_dir); }
  fs::path checkpoint_dir() const { return dir(cfg_.checkpoint_dir); }
  fs::path report_dir() const { return dir(cfg_.report_dir); }

  fs::path prepare(const fs::path& d) const {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw IoError("cannot create directory " + d.string() + ": " + ec.message());
    write_text((d / "config.json").string(), cfg_.dump());
    return d;
  }

  std::vector<RankingInstance> load_split(const std::string& name) const {
    const fs::path p = data_dir() / (name + ".jsonl");
    if (!fs::exists(p)) throw IoError("missing data file " + p.string() + " (run gen-data first)");
    return load_jsonl(p.string());
  }

  PolicyParams load_params(const std::string& path) const {
    if (!fs::exists(path)) throw IoError("missing checkpoint " + path);
    return load_checkpoint(cfg_.model, path);
  }

  void save_params(const PolicyParams& params, const fs::path& path, const std::string& stage, long steps) const {
    save_checkpoint(params, path.string());
    const nlohmann::ordered_json side{{"config_hash", meta_.config_hash},
                                      {"seed", meta_.seed},
                                      {"stage", stage},
                                      {"steps", steps},
                                      {"model_hash", params.config.hash()}};
    write_text(path.string() + ".meta.json", side.dump() + "\n");
  }

  std::string default_checkpoint() const { return (checkpoint_dir() / "rl.ckpt").string(); }

  Scorer scorer(const PolicyParams* params) const {
    if (opt_.scorer == "presentation") return presentation_order_scorer();
    return policy_scorer(*params, cfg_.train.mode(), cfg_.world.L);
  }

 private:
  Options opt_;
  RunConfig cfg_;
  ArtifactMeta meta_;
};

void cmd_gen_data(const Options& opt) {
  Run run(opt);
  const fs::path d = run.prepare(run.data_dir());
  const World world = generate_world(run.cfg().world);
  const InstanceSet set = build_all_instances(world, run.cfg().world.K, run.cfg().world.L);
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    save_jsonl(set.split(s), (d / (to_string(s) + ".jsonl")).string(), run.meta());
  }
  log(LogLevel::kInfo, "gen-data: train=" + std::to_string(set.train.size()) +
                           " valid=" + std::to_string(set.valid.size()) + " test=" + std::to_string(set.test.size()) +
                           " skipped=" + std::to_string(set.skipped.total()));
}

void cmd_build_sft(const Options& opt) {
  Run run(opt);
  const auto train = run.load_split("train");
  const fs::path d = run.prepare(run.data_dir());
  const SftCorpus corpus =
      build_sft_corpus(run.cfg().model.vocab(), train, run.cfg().teacher_noise, run.cfg().seed, run.cfg().world.L);
  save_sft_jsonl(corpus, (d / "sft.jsonl").string(), run.meta());
  log(LogLevel::kInfo,
      "build-sft: kept=" + std::to_string(corpus.kept) + " rejected=" + std::to_string(corpus.rejected));
}

void cmd_train(const Options& opt) {
  Run run(opt);
  TrainConfig tc = run.cfg().train;
  tc.stage = parse_stage(opt.stage);
  if (tc.stage == Stage::kRl && !opt.init.empty() && !tc.sft_init) {
    throw ConfigError("--init given while train.sft_init is false");
  }

  PolicyParams params;
  if (!opt.init.empty()) {
    params = run.load_params(opt.init);
  } else {
    RandomStream rng = RandomStream::keyed(run.cfg().seed, "init");
    params = PolicyParams::init(run.cfg().model, rng);
  }

  const fs::path d = run.prepare(run.checkpoint_dir());
  const std::string stage = to_string(tc.stage);
  TrainHooks hooks;
  hooks.diagnostic_path = (d / (stage + "_nonfinite.json")).string();
  hooks.checkpoint = [&](long step, const PolicyParams& p) {
    run.save_params(p, d / (stage + "_step" + std::to_string(step) + ".ckpt"), stage, step);
  };
  hooks.on_step = [&](const MetricsRow& row) {
    if (row.step % 100 == 0) {
      log(LogLevel::kInfo, stage + " step " + std::to_string(row.step) + " reward=" + std::to_string(row.mean_reward) +
                               " sft_loss=" + std::to_string(row.sft_loss));
    }
    log(LogLevel::kDebug, stage + " step " + std::to_string(row.step) + " ppo=" + std::to_string(row.ppo_obj) +
                              " head=" + std::to_string(row.head_obj));
  };

  MetricsLog metrics;
  long steps = 0;
  if (tc.stage == Stage::kSft) {
    const fs::path corpus_path = run.data_dir() / "sft.jsonl";
    if (!fs::exists(corpus_path)) throw IoError("missing SFT corpus " + corpus_path.string() + " (run build-sft first)");
    metrics = sft_train(params, load_sft_jsonl(corpus_path.string()), tc, hooks);
    steps = tc.steps_sft;
  } else {
    metrics = rl_train(params, run.load_split("train"), tc, hooks);
    steps = tc.steps_rl;
  }
  run.save_params(params, d / (stage + ".ckpt"), stage, steps);
  write_text((d / ("metrics_" + stage + ".csv")).string(),
             meta_comment(run.meta()) + "\n" + metrics.to_csv(opt.wallclock));
  log(LogLevel::kInfo, "train: wrote " + (d / (stage + ".ckpt")).string());
}

std::vector<StratumReport> standard_strata(const EvalReport& report) {
  std::vector<StratumReport> all;
  for (StratumKind kind : {StratumKind::kFreqQuartile, StratumKind::kFreqIndustrial, StratumKind::kHistoryLength}) {
    auto s = stratify(report.instances, report.cutoffs, StratumSpec{kind, {}});
    all.insert(all.end(), s.begin(), s.end());
  }
  return all;
}

void cmd_eval(const Options& opt) {
  Run run(opt);
  const auto instances = run.load_split(opt.split);
  std::optional<PolicyParams> params;
  const std::string ckpt = opt.checkpoint.empty() ? run.default_checkpoint() : opt.checkpoint;
  if (opt.scorer == "policy") params = run.load_params(ckpt);
  const EvalOptions eo{run.cfg().eval_cutoffs, run.cfg().train.mode(), run.cfg().world.L, run.cfg().train.workers};
  EvalReport report = evaluate(run.scorer(params ? &*params : nullptr), instances, eo);
  report.strata = standard_strata(report);
  report.config_hash = run.meta().config_hash;
  report.seed = run.meta().seed;
  report.checkpoint_id = opt.scorer == "policy" ? fs::path(ckpt).filename().string() : opt.scorer;

  const fs::path d = run.prepare(run.report_dir());
  emit_report(report, (d / "eval.csv").string(), ReportFormat::kCsv);
  write_text((d / "eval_instances.csv").string(), per_instance_csv(report));
  std::string line = "eval:";
  for (const CutoffStat& c : report.overall) line += " ndcg@" + std::to_string(c.cutoff) + "=" + std::to_string(c.mean);
  log(LogLevel::kInfo, line);
}

void cmd_probe(const Options& opt) {
  Run run(opt);
  const auto instances = run.load_split(opt.split);
  std::optional<PolicyParams> params;
  const std::string ckpt = opt.checkpoint.empty() ? run.default_checkpoint() : opt.checkpoint;
  if (opt.scorer == "policy") params = run.load_params(ckpt);
  const Scorer scorer = run.scorer(params ? &*params : nullptr);
  const fs::path d = run.prepare(run.report_dir());
  const int workers = run.cfg().train.workers;

  if (opt.probe_kind == "position") {
    const PositionProbe probe = probe_position(scorer, instances, run.cfg().probe_positions, workers);
    write_text((d / "probe_position.csv").string(), position_probe_csv(probe, run.meta()));
    write_text((d / "probe_position.svg").string(), position_probe_svg(probe, run.meta()));
    log(LogLevel::kInfo, std::string("probe position: histograms ") +
                             (probe.invariant() ? "identical" : "differ") + " across positions");
  } else {
    const HistoryShuffleProbe probe = probe_history_shuffle(scorer, instances, run.cfg().probe_shuffles,
                                                            run.cfg().seed, run.cfg().eval_cutoffs, workers);
    write_text((d / "probe_history_rows.csv").string(), history_rows_csv(probe.rows, run.meta()));
    write_text((d / "probe_history_summary.csv").string(), history_summary_csv(probe.summary, run.meta()));
    write_text((d / "probe_history_summary.svg").string(), history_summary_svg(probe.summary, run.meta()));
    for (const auto& s : probe.summary) {
      log(LogLevel::kInfo, "probe history-shuffle: ndcg@" + std::to_string(s.cutoff) + " avg=" + std::to_string(s.avg) +
                               " std=" + std::to_string(s.std) + " range=" + std::to_string(s.range) +
                               " original=" + std::to_string(s.original_avg));
    }
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Rebuilds charts and stratified tables from the raw per-instance and
// per-shuffle outputs, without touching a model.
void cmd_report(const Options& opt) {
  Run run(opt);
  const fs::path d = run.report_dir();
  const fs::path raw = d / "eval_instances.csv";
  if (!fs::exists(raw)) throw IoError("missing " + raw.string() + " (run eval first)");
  EvalReport report = parse_per_instance_csv(slurp(raw));
  if (report.config_hash != run.meta().config_hash || report.seed != run.meta().seed) {
    throw ConfigError(raw.string() + " was produced by a different config or seed");
  }
  report.strata = standard_strata(report);
  run.prepare(d);
  emit_report(report, (d / "report.csv").string(), ReportFormat::kCsv);
  emit_report(report, (d / "report.svg").string(), ReportFormat::kSvg);
  const fs::path rows = d / "probe_history_rows.csv";
  if (fs::exists(rows)) {
    const auto summary = summarize_history_rows(parse_history_rows_csv(slurp(rows)), run.cfg().eval_cutoffs);
    write_text((d / "probe_history_summary.svg").string(), history_summary_svg(summary, run.meta()));
  }
  log(LogLevel::kInfo, "report: wrote " + (d / "report.csv").string());
}

void cmd_verify(const Options& opt) {
  Run run(opt);
  int checked = 0;
  for (const fs::path& d : {run.data_dir(), run.checkpoint_dir(), run.report_dir()}) {
    if (!fs::exists(d)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(d)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& f : files) {
      const std::string name = f.filename().string();
      if (name == "config.json") {
        const RunConfig dumped = parse_run_config(slurp(f));
        if (dumped.hash() != run.meta().config_hash || dumped.seed != run.meta().seed) {
          throw ConfigError(f.string() + " does not match the given config");
        }
        ++checked;
        continue;
      }
      const std::string ext = f.extension().string();
      if (ext != ".jsonl" && ext != ".csv" && ext != ".svg" && ext != ".ckpt") continue;
      if (read_artifact_meta(f.string()) != run.meta()) throw ConfigError(f.string() + " carries a different stamp");
      ++checked;
    }
  }
  std::cout << "verified " << checked << " files config_hash=" << run.meta().config_hash
            << " seed=" << run.meta().seed << '\n';
}

std::string error_line(const std::string& kind, const std::string& message) {
  return nlohmann::json{{"error", kind}, {"message", message}}.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rationale-based listwise ranking: data, training, evaluation and probes"};
  app.require_subcommand(1);
  Options opt;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", opt.seed, "master seed, overrides the config");
    sub->add_option("--workers", opt.workers, "concurrent rollouts / evaluations")->check(CLI::PositiveNumber);
    sub->add_option("--out", opt.out, "base directory for relative paths in the config");
  };
  auto scored = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", opt.checkpoint, "parameters to evaluate (default <checkpoint_dir>/rl.ckpt)");
    sub->add_option("--split", opt.split, "instances to use")->check(CLI::IsMember({"train", "valid", "test"}));
    sub->add_option("--scorer", opt.scorer, "policy or the presentation-order reference")
        ->check(CLI::IsMember({"policy", "presentation"}));
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic world and its split instances");
  auto* sft = app.add_subcommand("build-sft", "build the filtered teacher corpus");
  auto* train = app.add_subcommand("train", "run one training stage");
  auto* eval = app.add_subcommand("eval", "candidate-set NDCG with strata");
  auto* probe = app.add_subcommand("probe", "position or history-shuffle probe");
  auto* report = app.add_subcommand("report", "rebuild tables and charts from raw outputs");
  auto* verify = app.add_subcommand("verify", "check that every output carries this config's hash and seed");
  for (auto* sub : {gen, sft, train, eval, probe, report, verify}) common(sub);
  train->add_option("--stage", opt.stage, "sft or rl")->check(CLI::IsMember({"sft", "rl"}));
  train->add_option("--init", opt.init, "warm-start checkpoint");
  train->add_flag("--wallclock", opt.wallclock, "record wall-clock time in the metrics log");
  scored(eval);
  scored(probe);
  probe->add_option("kind", opt.probe_kind, "position or history-shuffle")
      ->required()
      ->check(CLI::IsMember({"position", "history-shuffle"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_line("UsageError", e.what()) << '\n';
    return 2;
  }

  try {
    log_level();
    if (gen->parsed()) cmd_gen_data(opt);
    if (sft->parsed()) cmd_build_sft(opt);
    if (train->parsed()) cmd_train(opt);
    if (eval->parsed()) cmd_eval(opt);
    if (probe->parsed()) cmd_probe(opt);
    if (report->parsed()) cmd_report(opt);
    if (verify->parsed()) cmd_verify(opt);
  } catch (const ConfigError& e) {
    std::cerr << error_line("ConfigError", e.what()) << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << error_line("IoError", e.what()) << '\n';
    return 4;
  } catch (const ParseError& e) {
    std::cerr << error_line("ParseError", e.what()) << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << error_line("RuntimeError", e.what()) << '\n';
    return 1;
  }
  return 0;
}
