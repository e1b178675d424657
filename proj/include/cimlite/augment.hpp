#pragma once

#include <string>
#include <vector>

#include "cimlite/rng.hpp"
#include "cimlite/tensor.hpp"

namespace cimlite {

struct AugmentConfig {
  double p_flip = 0.5;
  double theta_max_deg = 15.0;
  double translate_max = 0.1;   // fraction of patch size
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double intensity_jitter = 0.2;  // per-channel scale drawn from [1-a, 1+a]
  double noise_sd = 0.05;

  void validate() const;
  static AugmentConfig preset(const std::string& strength);  // weak | default | strong
};

struct AugmentTrace {
  bool flip_h = false;
  bool flip_v = false;
  double theta = 0.0;  // radians
  double tx = 0.0, ty = 0.0;
  double scale = 1.0;
  std::vector<double> channel_scale;
  bool resampled = false;
};

// patch is [C,H,W]; geometric draws are shared across channels, intensity draws are per channel
Tensor augment_patch(const Tensor& patch, const AugmentConfig& cfg, Rng& rng,
                     AugmentTrace* trace = nullptr);

}  // namespace cimlite
