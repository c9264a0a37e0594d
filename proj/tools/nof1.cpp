#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "nof1/config.hpp"
#include "nof1/service/http.hpp"
#include "nof1/service/session.hpp"
#include "nof1/study.hpp"
#include "nof1/version.hpp"

namespace fs = std::filesystem;

namespace {

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(nof1::fnv1a(ss.str())));
  return buf;
}

void write_manifest(const nof1::StudyConfig& cfg, const nof1::StudyResult& res, const fs::path& config_path,
                    const fs::path& out) {
  const std::string canonical = nof1::to_json(cfg).dump();
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(nof1::fnv1a(canonical)));
  nof1::Json seeds = nof1::Json::array();
  for (const auto& rep : res.replicates) seeds.push_back({{"replicate", rep.replicate}, {"seed", rep.seeds.replicate}});
  nof1::Json files = nof1::Json::object();
  for (const char* name : {"logdet.csv", "best_prob.csv", "best_received.csv", "summary.csv", "seeds.csv",
                           "truths.csv", "failures.csv"})
    files[name] = file_hash(out / name);
  const nof1::Json manifest{{"format", "nof1.study-manifest/1"},
                            {"config_path", config_path.string()},
                            {"config_hash", hash},
                            {"config", nof1::to_json(cfg)},
                            {"master_seed", cfg.master_seed},
                            {"replicate_seeds", seeds},
                            {"failed_replicates", res.failed_replicates()},
                            {"files", files},
                            {"versions",
                             {{"nof1", nof1::kVersion},
                              {"eigen", nof1::eigen_version()},
                              {"compiler", nof1::compiler_version()}}}};
  std::ofstream(out / "manifest.json") << manifest.dump(2) << '\n';
}

int study_run(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
              std::optional<int> threads) {
  nof1::StudyConfig cfg = nof1::load_study_config(config_path, seed);
  if (threads) cfg.threads = *threads;
  std::cerr << "running " << cfg.n_replicates << " replicates x " << cfg.policies.size() << " policies, seed "
            << cfg.master_seed << '\n';
  const nof1::StudyResult res = nof1::run_study(cfg);
  nof1::write_study(res, out);
  write_manifest(cfg, res, config_path, out);
  if (res.failed_replicates() > 0)
    std::cerr << res.failed_replicates() << " replicate(s) failed; see failures.csv\n";
  nof1::write_summary(std::cout, nof1::summarize(nof1::metric_tables(res)));
  return 0;
}

int study_metrics(const std::string& dir) {
  nof1::write_summary(std::cout, nof1::summarize(nof1::read_metric_tables(dir)));
  return 0;
}

int serve(const std::string& host, int port, const std::string& data) {
  nof1::service::SessionStore store(data);
  httplib::Server server;
  nof1::service::install_routes(server, store);
  std::cerr << "serving " << store.list().size() << " session(s) from " << data << " on http://" << host << ':'
            << port << '\n';
  if (!server.listen(host, port)) {
    std::cerr << "error: cannot listen on " << host << ':' << port << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian adaptive N-of-1 trial design"};
  app.set_version_flag("--version", nof1::kVersion);
  app.require_subcommand(1);

  auto* study = app.add_subcommand("study", "Replicated simulation studies");
  study->require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  auto* run = study->add_subcommand("run", "Run a study from a YAML config");
  run->add_option("config", config_path, "Study config")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--seed", seed, "Override the config's master seed");
  run->add_option("--threads", threads, "Replicate-level worker threads (0 = all cores)");

  std::string metrics_dir;
  auto* metrics = study->add_subcommand("metrics", "Summarize the metric tables of a finished study");
  metrics->add_option("dir", metrics_dir, "Study output directory")->required()->check(CLI::ExistingDirectory);

  std::string host = "127.0.0.1", data_dir;
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "HTTP service for live trial sessions");
  srv->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  srv->add_option("--host", host, "Bind address");
  srv->add_option("--data", data_dir, "Session storage directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return study_run(config_path, out_dir, seed, threads);
    if (metrics->parsed()) return study_metrics(metrics_dir);
    if (srv->parsed()) return serve(host, port, data_dir);
  } catch (const nof1::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
