#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cimlite/augment.hpp"
#include "cimlite/data.hpp"
#include "cimlite/model.hpp"
#include "cimlite/optim.hpp"

namespace cimlite {

struct SslConfig {
  std::string objective = "simclr";  // simclr | vicreg
  double temperature = 0.2;
  double vic_lambda = 25.0;
  double vic_mu = 25.0;
  double vic_nu = 1.0;
  int iterations = 500;
  int batch = 64;
  uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 disables checkpoints
  std::string checkpoint_prefix;
  LarsConfig lars;
  AugmentConfig aug;

  void validate() const;
};

struct SslResult {
  std::vector<double> loss_history;
};

// two augmented views per sampled patch, both forwarded in one batch;
// LARS with cosine-decayed rate; train split only
SslResult pretrain(Encoder& enc, const DatasetBundle& data, const SslConfig& cfg);

void write_loss_csv(const std::vector<double>& history, const std::string& path);

}  // namespace cimlite
