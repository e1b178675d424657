#include "cimlite/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cimlite {

void AugmentConfig::validate() const {
  require(p_flip >= 0.0 && p_flip <= 1.0, "augment: p_flip must be in [0,1]");
  require(theta_max_deg >= 0.0, "augment: rotation bound must be >= 0");
  require(translate_max >= 0.0, "augment: translation bound must be >= 0");
  require(scale_lo > 0.0 && scale_hi >= scale_lo, "augment: invalid scale range");
  require(intensity_jitter >= 0.0 && intensity_jitter < 1.0,
          "augment: intensity jitter must be in [0,1)");
  require(noise_sd >= 0.0, "augment: noise sd must be >= 0");
}

AugmentConfig AugmentConfig::preset(const std::string& strength) {
  AugmentConfig cfg;
  double k = 1.0;
  if (strength == "weak")
    k = 0.5;
  else if (strength == "strong")
    k = 2.0;
  else if (strength != "default")
    throw std::invalid_argument("augment preset must be weak, default or strong");
  cfg.theta_max_deg *= k;
  cfg.intensity_jitter *= k;
  cfg.noise_sd *= k;
  return cfg;
}

namespace {

double bilinear(const Tensor& img, int c, double y, double x) {
  const int h = img.dim(1), w = img.dim(2);
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0, fx = x - x0;
  auto px = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return img.at(c, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

}  // namespace

Tensor augment_patch(const Tensor& patch, const AugmentConfig& cfg, Rng& rng,
                     AugmentTrace* trace) {
  require(patch.rank() == 3, "augment expects a [C,H,W] patch");
  cfg.validate();
  const int c = patch.dim(0), h = patch.dim(1), w = patch.dim(2);

  AugmentTrace tr;
  tr.flip_h = rng.uniform() < cfg.p_flip;
  tr.flip_v = rng.uniform() < cfg.p_flip;
  tr.theta = (2.0 * rng.uniform() - 1.0) * cfg.theta_max_deg * M_PI / 180.0;
  tr.tx = (2.0 * rng.uniform() - 1.0) * cfg.translate_max * w;
  tr.ty = (2.0 * rng.uniform() - 1.0) * cfg.translate_max * h;
  tr.scale = cfg.scale_lo + rng.uniform() * (cfg.scale_hi - cfg.scale_lo);
  tr.channel_scale.resize(static_cast<size_t>(c));
  for (double& s : tr.channel_scale)
    s = 1.0 + (2.0 * rng.uniform() - 1.0) * cfg.intensity_jitter;
  tr.resampled = tr.theta != 0.0 || tr.tx != 0.0 || tr.ty != 0.0 || tr.scale != 1.0;

  Tensor out({c, h, w});
  // flips are exact index reversals
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(ch, y, x) = patch.at(ch, tr.flip_v ? h - 1 - y : y, tr.flip_h ? w - 1 - x : x);

  if (tr.resampled) {
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    const double cs = std::cos(tr.theta), sn = std::sin(tr.theta);
    Tensor warped({c, h, w});
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = (x - cx - tr.tx) / tr.scale;
        const double v = (y - cy - tr.ty) / tr.scale;
        const double sx = cs * u + sn * v + cx;
        const double sy = -sn * u + cs * v + cy;
        for (int ch = 0; ch < c; ++ch) warped.at(ch, y, x) = bilinear(out, ch, sy, sx);
      }
    }
    out = std::move(warped);
  }

  for (int ch = 0; ch < c; ++ch) {
    const double s = tr.channel_scale[static_cast<size_t>(ch)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = out.at(ch, y, x) * s;
        if (cfg.noise_sd > 0.0) v += rng.normal(0.0, cfg.noise_sd);
        out.at(ch, y, x) = std::max(0.0, v);
      }
  }

  if (trace) *trace = tr;
  return out;
}

}  // namespace cimlite
