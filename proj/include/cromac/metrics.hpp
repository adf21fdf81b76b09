#pragma once
#include <cstdio>
#include <fstream>
#include <string>

#include "cromac/errors.hpp"

namespace cromac {

struct MetricsRow {
  long long step = 0;  // env steps so far
  double episode_return = 0.0;
  int win = 0;
  double loss_td = 0.0;
  double loss_vae = 0.0;
  double loss_kl = 0.0;
  double loss_adv = 0.0;
  double explore_eps = 0.0;
  double int_err_bound = 0.0;
};

// One CSV row per trainer step. Formatting is pinned (%.17g) so identical
// runs produce byte-identical files.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : os_(path, std::ios::binary) {
    if (!os_) throw ContractError("MetricsWriter: cannot open " + path);
    os_ << "step,episode_return,win,loss_td,loss_vae,loss_kl,loss_adv,explore_eps,int_err_bound"
        << "\n";
  }

  void write(const MetricsRow& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.step, r.episode_return, r.win, r.loss_td, r.loss_vae, r.loss_kl, r.loss_adv,
                  r.explore_eps, r.int_err_bound);
    os_ << buf;
    if (!os_) throw ContractError("MetricsWriter: write failed");
  }

  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

}  // namespace cromac
