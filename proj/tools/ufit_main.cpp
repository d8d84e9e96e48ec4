#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ufit/eval.hpp"

namespace fs = std::filesystem;

namespace {

bool verbose_logging() {
  const char* v = std::getenv("UFIT_LOG");
  return v != nullptr && std::string(v) != "" && std::string(v) != "0";
}

struct RunDir {
  ufit::Vocabulary vocab;
  ufit::Checkpoint final;
  ufit::TrainConfig config;
};

RunDir load_run(const std::string& dir) {
  RunDir run;
  run.vocab = ufit::Vocabulary::load((fs::path(dir) / "vocab.txt").string());
  run.final = ufit::load_checkpoint((fs::path(dir) / "final.ckpt").string(), run.vocab);
  run.config = ufit::load_train_config((fs::path(dir) / "config.json").string());
  return run;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  const ufit::SynthConfig cfg = ufit::load_synth_config(config_path);
  const ufit::Dataset data = ufit::generate_synthetic_campaigns(cfg);
  ufit::save_jsonl(data, out_path);
  std::printf("wrote %s: %zu samples, %zu campaigns, %d classes\n", out_path.c_str(),
              data.samples.size(), data.campaign_order.size(), data.num_classes);
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& config_path,
              const std::string& mode, const std::string& out_dir, int jobs) {
  const ufit::Dataset data = ufit::load_jsonl(data_path);
  ufit::TrainConfig cfg = ufit::load_train_config(config_path);
  cfg.mode = ufit::train_mode_from_string(mode);
  if (jobs > 0) cfg.jobs = jobs;

  const ufit::PipelineResult result = ufit::train_pipeline(data, cfg);
  ufit::write_run_artifacts(result, cfg, out_dir);
  if (verbose_logging())
    for (const auto& line : result.log_lines) std::fprintf(stderr, "%s\n", line.c_str());

  std::printf("mode=%s stages=%zu best_val_accuracy=%.4f out=%s\n", ufit::to_string(cfg.mode),
              result.stage_checkpoints.size(), result.final.val_accuracy, out_dir.c_str());
  if (result.proxies) std::printf("proxies=%d\n", result.proxies->size());
  if (result.keywords) {
    std::printf("class keyword sets:");
    for (const auto& [cls, words] : result.keywords->class_keywords)
      std::printf(" class%d=%zu", cls, words.size());
    std::printf("\n");
  }
  return 0;
}

int cmd_eval(const std::string& data_path, const std::string& config_path,
             const std::string& run_dir, const std::string& protocol, int runs,
             const std::string& modes_csv, const std::string& out_path,
             const std::string& csv_path, int jobs, bool no_variants) {
  const ufit::Dataset data = ufit::load_jsonl(data_path);

  ufit::TrainConfig base;
  if (!config_path.empty()) {
    base = ufit::load_train_config(config_path);
  } else if (!run_dir.empty()) {
    base = ufit::load_train_config((fs::path(run_dir) / "config.json").string());
  } else {
    throw CLI::ValidationError("eval", "either --config or --run is required");
  }

  ufit::EvalOptions opt;
  if (protocol == "incremental") opt.protocol = ufit::EvalProtocol::incremental;
  else if (protocol == "pairwise") opt.protocol = ufit::EvalProtocol::pairwise;
  else if (protocol == "oracle") opt.protocol = ufit::EvalProtocol::oracle;
  else throw CLI::ValidationError("eval", "--protocol must be incremental, pairwise, or oracle");
  opt.runs = runs;
  opt.include_variants = !no_variants;
  if (jobs > 0) opt.jobs = jobs;

  if (!modes_csv.empty()) {
    opt.modes.clear();
    std::stringstream ss(modes_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) opt.modes.push_back(ufit::train_mode_from_string(tok));
  }

  const ufit::EvalReport report = ufit::incremental_eval(data, base, opt);
  ufit::save_report_json(report, out_path);
  if (!csv_path.empty()) ufit::save_report_csv(report, csv_path);

  std::printf("protocol=%s runs=%d cells=%zu audit_batches=%ld audit_violations=%ld\n",
              report.protocol.c_str(), report.runs, report.cells.size(), report.audit.batches,
              report.audit.violations);
  for (const auto& [mode, splits] : report.aggregates)
    for (const auto& [split, stat] : splits)
      std::printf("%-12s %-12s %.4f +/- %.4f (n=%d)\n", mode.c_str(), split.c_str(), stat.mean,
                  stat.stddev, stat.n);
  return 0;
}

int cmd_keywords(const std::string& run_dir, int top) {
  const RunDir run = load_run(run_dir);
  if (!run.final.keywords) {
    std::printf("run has no keyword table (mode %s)\n", ufit::to_string(run.final.mode));
    return 0;
  }
  const auto& table = *run.final.keywords;
  for (const auto& [pid, ranked] : table.per_proxy) {
    std::printf("proxy %d (class %d):\n", pid, table.proxy_class.at(pid));
    int rank = 1;
    for (const auto& sw : ranked) {
      if (rank > top) break;
      std::printf("  %2d. %-24s %.6f\n", rank++, sw.word.c_str(), sw.score);
    }
  }
  for (const auto& [cls, words] : table.class_keywords) {
    std::printf("class %d mask set:", cls);
    for (const auto& w : words) std::printf(" %s", w.c_str());
    std::printf("\n");
  }
  return 0;
}

int cmd_probe(const std::string& run_dir, const std::string& data_path) {
  const RunDir run = load_run(run_dir);
  if (!run.final.keywords)
    throw std::runtime_error("probe: run has no keyword table; train with mode ufit or mask_only");
  const ufit::Dataset data = ufit::load_jsonl(data_path);
  const auto [plain, masked] = ufit::keyword_masked_eval(run.final, data, *run.final.keywords);
  std::printf("plain_accuracy=%.4f masked_accuracy=%.4f drop=%.4f\n", plain, masked,
              plain - masked);
  return 0;
}

int cmd_lipschitz(const std::string& run_dir, const std::string& data_path) {
  const RunDir run = load_run(run_dir);
  const ufit::Dataset data = ufit::load_jsonl(data_path);

  ufit::ProxySet proxies;
  if (run.final.proxies) {
    proxies = *run.final.proxies;
  } else {
    // no stored proxies (plain fine-tune run): discover them on this
    // checkpoint's embeddings of the evaluation data
    std::printf("run has no stored proxies; discovering on checkpoint embeddings\n");
    const auto tokens = ufit::tokenize_all(data, run.final.vocab, run.final.params.cfg.max_seq_len);
    std::vector<ufit::Vec> embeds;
    std::vector<int> labels;
    for (size_t i = 0; i < tokens.size(); ++i) {
      embeds.push_back(ufit::embed(run.final.params, tokens[i]));
      labels.push_back(data.samples[i].label);
    }
    proxies = ufit::discover_proxies(embeds, labels, data.num_classes, run.config.proxy);
  }

  const ufit::LipschitzReport report = ufit::lipschitz_score(run.final, proxies, data);
  for (const auto& [pid, l] : report.per_proxy) std::printf("proxy %d: L=%.6f\n", pid, l);
  std::printf("l_score=%.6f paired_accuracy=%.4f\n", report.l_score, report.paired_accuracy);
  return 0;
}

int cmd_report(const std::string& in_path) {
  std::ifstream in(in_path);
  if (!in) throw std::runtime_error("cannot read report: " + in_path);
  nlohmann::json j;
  in >> j;
  std::printf("protocol=%s runs=%d reference=%s\n", j.value("protocol", "?").c_str(),
              j.value("runs", 0), j.value("reference_mode", "?").c_str());
  std::printf("%-12s %-12s %8s %8s %6s\n", "mode", "split", "mean", "stddev", "n");
  for (const auto& [mode, splits] : j.at("aggregates").items())
    for (const auto& [split, stat] : splits.items())
      std::printf("%-12s %-12s %8.4f %8.4f %6d\n", mode.c_str(), split.c_str(),
                  stat.value("mean", 0.0), stat.value("stddev", 0.0), stat.value("n", 0));
  if (j.contains("p_values"))
    for (const auto& [mode, splits] : j.at("p_values").items())
      for (const auto& [split, p] : splits.items())
        std::printf("p-value %-12s %-12s %.6f\n", mode.c_str(), split.c_str(), p.get<double>());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ufit: controlled-underfitting laboratory for campaign-shifted text classification"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, run_dir, mode, protocol = "incremental";
  std::string modes_csv, csv_path, report_in;
  int runs = 5, top = 10, jobs = 0;
  bool no_variants = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic campaign dataset");
  gen->add_option("--config", config_path, "synthetic config JSON")->required();
  gen->add_option("--out", out_path, "output JSONL path")->required();

  auto* train = app.add_subcommand("train", "run the training pipeline");
  train->add_option("--data", data_path, "dataset JSONL")->required();
  train->add_option("--config", config_path, "train config JSON")->required();
  train->add_option("--mode", mode, "plain_ft | mask_only | smooth_only | ufit")->required();
  train->add_option("--out", out_path, "output run directory")->required();
  train->add_option("--jobs", jobs, "worker cap");

  auto* eval = app.add_subcommand("eval", "run the evaluation grid");
  eval->add_option("--data", data_path, "dataset JSONL")->required();
  eval->add_option("--config", config_path, "train config JSON");
  eval->add_option("--run", run_dir, "prior run directory (for its config)");
  eval->add_option("--protocol", protocol, "incremental | pairwise | oracle");
  eval->add_option("--runs", runs, "seeds per cell");
  eval->add_option("--modes", modes_csv, "comma-separated mode list");
  eval->add_option("--out", out_path, "report JSON path")->required();
  eval->add_option("--csv", csv_path, "flat CSV path");
  eval->add_option("--jobs", jobs, "worker cap");
  eval->add_flag("--no-variants", no_variants, "skip fixed-first/prior-year/oracle rows");

  auto* kw = app.add_subcommand("keywords", "print a run's extracted keywords");
  kw->add_option("--run", run_dir, "run directory")->required();
  kw->add_option("--top", top, "keywords per proxy");

  auto* probe = app.add_subcommand("probe", "keyword-masked overfitting probe");
  probe->add_option("--run", run_dir, "run directory")->required();
  probe->add_option("--data", data_path, "test dataset JSONL")->required();

  auto* lip = app.add_subcommand("lipschitz", "per-proxy local Lipschitz scores");
  lip->add_option("--run", run_dir, "run directory")->required();
  lip->add_option("--data", data_path, "test dataset JSONL")->required();

  auto* rep = app.add_subcommand("report", "pretty-print a report JSON");
  rep->add_option("--in", report_in, "report JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_path);
    if (train->parsed()) return cmd_train(data_path, config_path, mode, out_path, jobs);
    if (eval->parsed())
      return cmd_eval(data_path, config_path, run_dir, protocol, runs, modes_csv, out_path,
                      csv_path, jobs, no_variants);
    if (kw->parsed()) return cmd_keywords(run_dir, top);
    if (probe->parsed()) return cmd_probe(run_dir, data_path);
    if (lip->parsed()) return cmd_lipschitz(run_dir, data_path);
    if (rep->parsed()) return cmd_report(report_in);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
