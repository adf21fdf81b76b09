// Command-line front end: train / eval / verify / table1.
// Exit codes: 0 success, 1 assertion or property failure, 2 usage error.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cromac/eval.hpp"
#include "cromac/trainer.hpp"
#include "cromac/verify.hpp"

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) seeds.push_back(std::stoull(cur));
      cur.clear();
    } else if (c >= '0' && c <= '9') {
      cur.push_back(c);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      throw cromac::ContractError("bad seed list: " + s);
    }
  }
  if (!cur.empty()) seeds.push_back(std::stoull(cur));
  if (seeds.empty()) throw cromac::ContractError("empty seed list");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certifiably robust multi-agent communication framework"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a policy");
  std::string train_env, train_config, train_out = "runs/run";
  std::uint64_t train_seed = 0;
  train->add_option("--env", train_env, "environment/preset id")->required();
  train->add_option("--config", train_config, "key = value config file overriding the preset");
  train->add_option("--seed", train_seed, "master seed")->required();
  train->add_option("--out", train_out, "output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under an attack");
  std::string eval_ckpt, eval_attack = "natural", eval_seeds = "0,1,2,3,4", eval_bounds_report;
  double eval_epsilon = -1.0;
  std::size_t eval_episodes = 200;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--attack", eval_attack, "natural|random|fgsm|pgd");
  eval->add_option("--epsilon", eval_epsilon, "attack budget (default: training epsilon)");
  eval->add_option("--episodes", eval_episodes, "episodes per seed");
  eval->add_option("--seeds", eval_seeds, "comma-separated seed list");
  eval->add_option("--bounds-report", eval_bounds_report,
                   "write per-step certified z envelopes to this CSV");

  // verify
  auto* verify = app.add_subcommand("verify", "run a property-oracle suite");
  std::string verify_suite;
  std::size_t verify_cases = 1000;
  std::uint64_t verify_seed = 7;
  verify->add_option("--suite", verify_suite, "poe|ibp|bounds|grad")->required();
  verify->add_option("--cases", verify_cases, "number of random cases");
  verify->add_option("--seed", verify_seed, "oracle seed");

  // table1
  auto* table1 = app.add_subcommand("table1", "emit the eight-column attack matrix as CSV");
  std::string t1_ckpt, t1_env, t1_out, t1_seeds = "0,1,2,3,4";
  std::size_t t1_episodes = 200;
  table1->add_option("--checkpoint", t1_ckpt, "checkpoint path")->required();
  table1->add_option("--env", t1_env, "environment id (must match the checkpoint)")->required();
  table1->add_option("--episodes", t1_episodes, "episodes per seed");
  table1->add_option("--seeds", t1_seeds, "comma-separated seed list");
  table1->add_option("--out", t1_out, "also write the CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      cromac::RunConfig cfg = cromac::preset(train_env);
      if (!train_config.empty()) cfg = cromac::load_config_file(train_config, cfg);
      cfg.validate();
      cromac::TrainSummary s = cromac::run_training(cfg, train_seed, train_out);
      std::printf("trained %lld env steps (%lld trainer steps) in %.1f s\n", s.env_steps,
                  s.trainer_steps, s.wall_seconds);
      std::printf("checkpoint: %s\nmetrics: %s\n", s.checkpoint_path.c_str(),
                  s.metrics_path.c_str());
      return 0;
    }
    if (*eval) {
      cromac::LoadedModel model = cromac::load_model(eval_ckpt);
      const double eps = eval_epsilon >= 0.0 ? eval_epsilon : model.cfg.epsilon;
      cromac::AttackSpec spec(cromac::AttackSpec::parse_kind(eval_attack), eps,
                              model.cfg.pgd_steps);
      cromac::EvalResult r =
          cromac::run_evaluation(model.nets, model.cfg, spec, eval_episodes,
                                 parse_seed_list(eval_seeds), eval_bounds_report);
      for (std::size_t i = 0; i < r.per_seed_win.size(); ++i)
        std::printf("seed[%zu] win rate: %.4f\n", i, r.per_seed_win[i]);
      std::printf("win rate: %.4f +/- %.4f over %lld episodes\n", r.mean, r.stddev,
                  r.episodes_total);
      std::printf("max message deviation: %.6g (budget %.6g)\n", r.max_deviation, eps);
      return 0;
    }
    if (*verify) {
      cromac::SuiteResult r = cromac::run_verify_suite(verify_suite, verify_cases, verify_seed);
      std::printf("[%s] suite %s: %zu cases, %zu failures (%.2f s)%s%s\n",
                  r.pass ? "PASS" : "FAIL", r.name.c_str(), r.cases, r.failures, r.seconds,
                  r.detail.empty() ? "" : " - ", r.detail.c_str());
      return r.pass ? 0 : 1;
    }
    if (*table1) {
      cromac::LoadedModel model = cromac::load_model(t1_ckpt);
      if (model.cfg.env != t1_env)
        throw cromac::ContractError("checkpoint env '" + model.cfg.env +
                                    "' does not match --env '" + t1_env + "'");
      const std::string csv =
          cromac::table1_csv(model.nets, model.cfg, t1_episodes, parse_seed_list(t1_seeds));
      std::fputs(csv.c_str(), stdout);
      if (!t1_out.empty()) {
        std::ofstream os(t1_out, std::ios::binary);
        os << csv;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
