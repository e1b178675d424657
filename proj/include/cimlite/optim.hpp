#pragma once

#include <vector>

#include "cimlite/model.hpp"
#include "cimlite/tape.hpp"

namespace cimlite {

struct LarsConfig {
  double lr = 0.3;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double trust = 1e-3;
  double eps = 1e-9;
  bool use_adaptation = true;

  void validate() const;
};

// layer-wise adaptive rate scaling with momentum; params flagged exempt
// (biases, normalization scales/shifts) skip both adaptation and weight decay
class Lars {
 public:
  Lars(std::vector<ParamRef> params, LarsConfig cfg);

  // grads[i] pairs with params[i]; lr_scale multiplies the base rate (schedule hook)
  void step(const std::vector<const Tensor*>& grads, double lr_scale = 1.0);
  void step(Tape& tape, const std::vector<int>& ids, double lr_scale = 1.0);

  const LarsConfig& config() const { return cfg_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> velocity_;
  LarsConfig cfg_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

class Adam {
 public:
  Adam(std::vector<ParamRef> params, AdamConfig cfg);

  void step(const std::vector<const Tensor*>& grads, double lr_scale = 1.0);
  void step(Tape& tape, const std::vector<int>& ids, double lr_scale = 1.0);

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
  AdamConfig cfg_;
};

// cosine decay to zero, no warmup: 0.5 * (1 + cos(pi * iter / total))
double cosine_decay(int iter, int total);

}  // namespace cimlite
