#include "cimlite/lrp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cimlite/conv.hpp"
#include "cimlite/errors.hpp"
#include "cimlite/eval.hpp"
#include "cimlite/wire.hpp"

namespace cimlite {

void LrpConfig::validate() const {
  require(epsilon > 0.0, "lrp: epsilon must be positive");
  require(gamma >= 0.0, "lrp: gamma must be >= 0");
  require(box_lo <= box_hi, "lrp: box bounds out of order");
  require(tau_noise >= 0.0 && tau_noise < 1.0, "lrp: noise threshold must be in [0,1)");
  require(percentile > 0.0 && percentile <= 100.0, "lrp: percentile must be in (0,100]");
  require(target_index >= 0, "lrp: target index must be >= 0");
}

namespace {

constexpr double kBnEps = 1e-5;  // matches the eval-mode forward

double sgn(double v) { return v >= 0.0 ? 1.0 : -1.0; }

struct FoldedConv {
  Tensor w, b;
  int groups = 1;
  int pad = 0;
};

// absorb an eval-mode batchnorm into the convolution before it
FoldedConv fold_bn(const Tensor& w, const Tensor& b, const Tensor& gamma, const Tensor& beta,
                   const BnStats& stats, int groups, int pad) {
  FoldedConv f;
  f.w = w;
  f.b = Tensor({w.dim(0)});
  f.groups = groups;
  f.pad = pad;
  const int cout = w.dim(0);
  const int64_t per = w.numel() / cout;
  for (int o = 0; o < cout; ++o) {
    const double inv = gamma.at(o) / std::sqrt(stats.var.at(o) + kBnEps);
    for (int64_t k = 0; k < per; ++k)
      f.w.data[static_cast<size_t>(o * per + k)] *= inv;
    f.b.at(o) = (b.at(o) - stats.mean.at(o)) * inv + beta.at(o);
  }
  return f;
}

Tensor conv_fwd(const Tensor& x, const FoldedConv& f) {
  const ConvDims d = ConvDims::make(x, f.w, f.groups, f.pad);
  Tensor out({d.n, d.cout, d.oh, d.ow});
  conv2d_forward(x, f.w, f.b.data.data(), d, out);
  return out;
}

Tensor conv_bwd(const Tensor& s, const Tensor& x_like, const FoldedConv& f) {
  const ConvDims d = ConvDims::make(x_like, f.w, f.groups, f.pad);
  Tensor gx(x_like.shape);
  conv2d_backward_data(s, f.w, d, gx);
  return gx;
}

// gamma rule reinforces positive contributions: w + gamma * w^+, same for bias
FoldedConv reinforced(const FoldedConv& f, double gamma) {
  FoldedConv m = f;
  if (gamma != 0.0) {
    for (double& v : m.w.data) v += gamma * std::max(v, 0.0);
    for (double& v : m.b.data) v += gamma * std::max(v, 0.0);
  }
  return m;
}

FoldedConv positive_part(const FoldedConv& f) {
  FoldedConv m = f;
  for (double& v : m.w.data) v = std::max(v, 0.0);
  for (double& v : m.b.data) v = std::max(v, 0.0);
  return m;
}

FoldedConv negative_part(const FoldedConv& f) {
  FoldedConv m = f;
  for (double& v : m.w.data) v = std::min(v, 0.0);
  for (double& v : m.b.data) v = std::min(v, 0.0);
  return m;
}

Tensor relu_t(Tensor x) {
  for (double& v : x.data) v = std::max(v, 0.0);
  return x;
}

// generic modified-weight step: R_in = a (.) bwd(R_out / stab(fwd(a)))
Tensor propagate_conv(const Tensor& a, const FoldedConv& rule, const Tensor& r_out, double eps) {
  // denominator is the sum of input contributions only; keeping the bias out
  // of it makes every step conserve relevance up to the stabilizer
  FoldedConv nb = rule;
  nb.b = Tensor::zeros(nb.b.shape);
  const Tensor z = conv_fwd(a, nb);
  Tensor s = r_out;
  for (size_t i = 0; i < s.data.size(); ++i)
    s.data[i] = r_out.data[i] / (z.data[i] + eps * sgn(z.data[i]));
  Tensor r = conv_bwd(s, a, rule);
  for (size_t i = 0; i < r.data.size(); ++i) r.data[i] *= a.data[i];
  return r;
}

Tensor gap2(const Tensor& x) {
  Tensor out({x.dim(0), x.dim(1)});
  const double inv = 1.0 / (x.dim(2) * x.dim(3));
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c) {
      double s = 0.0;
      for (int y = 0; y < x.dim(2); ++y)
        for (int xx = 0; xx < x.dim(3); ++xx) s += x.at(n, c, y, xx);
      out.at(n, c) = s * inv;
    }
  return out;
}

Tensor linear_fwd(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out({x.dim(0), w.dim(0)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int j = 0; j < w.dim(0); ++j) {
      double s = b.at(j);
      for (int q = 0; q < w.dim(1); ++q) s += w.at(j, q) * x.at(n, q);
      out.at(n, j) = s;
    }
  return out;
}

// epsilon rule through a dense layer; zpre are the layer pre-activations
Tensor eps_linear(const Tensor& in, const Tensor& w, const Tensor& r_out, double eps) {
  Tensor r({in.dim(0), in.dim(1)});
  for (int n = 0; n < in.dim(0); ++n)
    for (int j = 0; j < w.dim(0); ++j) {
      double z = 0.0;
      for (int q = 0; q < w.dim(1); ++q) z += in.at(n, q) * w.at(j, q);
      const double f = r_out.at(n, j) / (z + eps * sgn(z));
      if (f == 0.0) continue;
      for (int q = 0; q < w.dim(1); ++q) r.at(n, q) += in.at(n, q) * w.at(j, q) * f;
    }
  return r;
}

struct BlockTrace {
  Tensor in, a2, a3, z4, z5;
};

}  // namespace

std::vector<RelevanceMap> lrp_explain_batch(CimModel& model, const Tensor& patches,
                                            const LrpConfig& cfg) {
  cfg.validate();
  require(patches.rank() == 4 && patches.dim(1) == model.cfg.markers,
          "lrp: patches must be [B," + std::to_string(model.cfg.markers) + ",H,W]");
  const int bsz = patches.dim(0), markers = model.cfg.markers;
  const int ck = model.cfg.feat_dim();
  const int hh = patches.dim(2), ww = patches.dim(3);
  const double hw = static_cast<double>(hh) * ww;
  const bool composite = cfg.rules == LrpConfig::Rules::composite;
  const double conv_gamma = composite ? cfg.gamma : 0.0;

  const FoldedConv stem = fold_bn(model.stem_w, model.stem_b, model.stem_bn_g, model.stem_bn_b,
                                  model.stem_bn, markers, 0);
  std::vector<FoldedConv> dw, g1;
  for (const auto& b : model.blocks) {
    dw.push_back(fold_bn(b.dw_w, b.dw_b, b.bn1_g, b.bn1_b, b.bn1, ck, 1));
    g1.push_back(fold_bn(b.g1_w, b.g1_b, b.bn2_g, b.bn2_b, b.bn2, markers, 0));
  }

  // eval forward on the folded network, keeping what the backward pass needs
  const Tensor z1 = conv_fwd(patches, stem);
  Tensor cur = relu_t(z1);
  std::vector<BlockTrace> traces;
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    BlockTrace tr;
    tr.in = cur;
    tr.a2 = relu_t(conv_fwd(cur, dw[i]));

    const auto& blk = model.blocks[i];
    Tensor sq = gap2(tr.a2);
    sq.shape = {bsz, ck, 1, 1};
    const FoldedConv se1{blk.se_w1, blk.se_b1, markers, 0};
    const FoldedConv se2{blk.se_w2, blk.se_b2, markers, 0};
    Tensor gate = conv_fwd(relu_t(conv_fwd(sq, se1)), se2);
    for (double& v : gate.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));

    tr.a3 = tr.a2;
    for (int n = 0; n < bsz; ++n)
      for (int c = 0; c < ck; ++c) {
        const double g = gate.data[static_cast<size_t>(n * ck + c)];
        for (int y = 0; y < hh; ++y)
          for (int x = 0; x < ww; ++x) tr.a3.at(n, c, y, x) *= g;
      }

    tr.z4 = conv_fwd(tr.a3, g1[i]);
    tr.z5 = tr.z4;
    for (size_t k = 0; k < tr.z5.data.size(); ++k) tr.z5.data[k] += tr.in.data[k];
    cur = relu_t(tr.z5);
    traces.push_back(std::move(tr));
  }
  const Tensor pooled = gap2(cur);

  // relevance of the explained scalar at the pooled embedding
  Tensor r_pooled({bsz, ck});
  std::vector<double> explained(static_cast<size_t>(bsz));
  switch (cfg.target) {
    case LrpConfig::Target::embedding_sum:
      r_pooled = pooled;
      for (int n = 0; n < bsz; ++n) {
        double s = 0.0;
        for (int c = 0; c < ck; ++c) s += pooled.at(n, c);
        explained[static_cast<size_t>(n)] = s;
      }
      break;
    case LrpConfig::Target::embedding_unit:
      require(cfg.target_index < ck, "lrp: embedding unit out of range");
      for (int n = 0; n < bsz; ++n) {
        r_pooled.at(n, cfg.target_index) = pooled.at(n, cfg.target_index);
        explained[static_cast<size_t>(n)] = pooled.at(n, cfg.target_index);
      }
      break;
    case LrpConfig::Target::logit: {
      require(cfg.target_index < model.cfg.classes, "lrp: logit index out of range");
      const Tensor h_pre = linear_fwd(pooled, model.cls_w1, model.cls_b1);
      const Tensor h = relu_t(h_pre);
      const Tensor logits = linear_fwd(h, model.cls_w2, model.cls_b2);
      Tensor r_logit({bsz, model.cfg.classes});
      for (int n = 0; n < bsz; ++n) {
        explained[static_cast<size_t>(n)] = logits.at(n, cfg.target_index);
        r_logit.at(n, cfg.target_index) = logits.at(n, cfg.target_index);
      }
      const Tensor r_h = eps_linear(h, model.cls_w2, r_logit, cfg.epsilon);
      r_pooled = eps_linear(pooled, model.cls_w1, r_h, cfg.epsilon);
      break;
    }
  }

  // pooling redistributes along the uniform 1/HW pooling weights, i.e. the
  // epsilon rule over z_pos = a_pos/HW; positions the ReLU zeroed get nothing,
  // which keeps the residual-split denominators positive wherever R != 0
  Tensor r({bsz, ck, hh, ww});
  for (int n = 0; n < bsz; ++n)
    for (int c = 0; c < ck; ++c) {
      const double p = pooled.at(n, c);
      const double s = r_pooled.at(n, c) / (p + cfg.epsilon * sgn(p)) / hw;
      for (int y = 0; y < hh; ++y)
        for (int x = 0; x < ww; ++x) r.at(n, c, y, x) = cur.at(n, c, y, x) * s;
    }

  for (size_t bi = traces.size(); bi-- > 0;) {
    const BlockTrace& tr = traces[bi];
    // residual join: split proportionally to each path's contribution
    Tensor r_z4 = r, r_skip = r;
    for (size_t k = 0; k < r.data.size(); ++k) {
      const double denom = tr.z5.data[k] + cfg.epsilon * sgn(tr.z5.data[k]);
      r_z4.data[k] = r.data[k] * tr.z4.data[k] / denom;
      r_skip.data[k] = r.data[k] * tr.in.data[k] / denom;
    }
    // refinement conv; the SE gate is a fixed coefficient, so relevance passes
    // through the multiplicative scaling unchanged
    const Tensor r_a3 = propagate_conv(tr.a3, reinforced(g1[bi], conv_gamma), r_z4, cfg.epsilon);
    const Tensor r_a2 = r_a3;
    Tensor r_in = propagate_conv(tr.in, reinforced(dw[bi], conv_gamma), r_a2, cfg.epsilon);
    for (size_t k = 0; k < r_in.data.size(); ++k) r_in.data[k] += r_skip.data[k];
    r = std::move(r_in);
  }

  // input layer
  Tensor r_x(patches.shape);
  if (composite) {
    const FoldedConv wp = positive_part(stem);
    const FoldedConv wm = negative_part(stem);
    const Tensor lo_img = Tensor::full(patches.shape, cfg.box_lo);
    const Tensor hi_img = Tensor::full(patches.shape, cfg.box_hi);
    const Tensor z_lo = conv_fwd(lo_img, wp);
    const Tensor z_hi = conv_fwd(hi_img, wm);
    Tensor s = r;
    for (size_t k = 0; k < s.data.size(); ++k) {
      const double denom = z1.data[k] - z_lo.data[k] - z_hi.data[k];
      s.data[k] = r.data[k] / (denom + cfg.epsilon * sgn(denom));
    }
    const Tensor cx = conv_bwd(s, patches, stem);
    const Tensor cl = conv_bwd(s, patches, wp);
    const Tensor ch = conv_bwd(s, patches, wm);
    for (size_t k = 0; k < r_x.data.size(); ++k)
      r_x.data[k] = patches.data[k] * cx.data[k] - cfg.box_lo * cl.data[k] -
                    cfg.box_hi * ch.data[k];
  } else {
    r_x = propagate_conv(patches, stem, r, cfg.epsilon);
  }

  std::vector<RelevanceMap> maps;
  maps.reserve(static_cast<size_t>(bsz));
  const size_t chw = static_cast<size_t>(markers) * hh * ww;
  for (int n = 0; n < bsz; ++n) {
    RelevanceMap m;
    m.values = Tensor({markers, hh, ww});
    std::copy_n(r_x.data.begin() + static_cast<ptrdiff_t>(chw * static_cast<size_t>(n)), chw,
                m.values.data.begin());
    m.explained = explained[static_cast<size_t>(n)];
    maps.push_back(std::move(m));
  }
  return maps;
}

RelevanceMap lrp_explain(CimModel& model, const Tensor& patch, const LrpConfig& cfg) {
  require(patch.rank() == 3, "lrp: patch must be [C,H,W]");
  Tensor batch({1, patch.dim(0), patch.dim(1), patch.dim(2)});
  batch.data = patch.data;
  return lrp_explain_batch(model, batch, cfg)[0];
}

Tensor aggregate_channel_relevance(const Tensor& relevance, const Tensor& patch,
                                   double tau_noise, double pct) {
  require(relevance.rank() == 3, "aggregate: relevance must be [C,H,W]");
  require(relevance.same_shape(patch), "aggregate: relevance and patch shapes differ");
  const int c = relevance.dim(0);
  const double hw = static_cast<double>(relevance.dim(1)) * relevance.dim(2);

  double mx = 0.0;
  for (double v : relevance.data) mx = std::max(mx, std::abs(v));
  Tensor scores({c});
  if (mx == 0.0) return scores;

  // noise floor, then keep only positive evidence
  std::vector<double> pos(relevance.data.size());
  double pos_max = 0.0;
  for (size_t i = 0; i < pos.size(); ++i) {
    double v = relevance.data[i];
    if (std::abs(v) < tau_noise * mx) v = 0.0;
    v = std::max(v, 0.0);
    pos[i] = v;
    pos_max = std::max(pos_max, v);
  }
  const double p = percentile(pos, pct);
  const double denom = p > 0.0 ? p : pos_max;
  if (denom == 0.0) return scores;

  for (int ch = 0; ch < c; ++ch) {
    double rel = 0.0, inten = 0.0;
    const size_t base = static_cast<size_t>(ch) * static_cast<size_t>(hw);
    for (size_t k = 0; k < static_cast<size_t>(hw); ++k) {
      rel += std::min(pos[base + k], denom) / denom;
      inten += patch.data[base + k];
    }
    scores.at(ch) = (rel / hw) * (inten / hw);
  }
  return scores;
}

double module_score(const Tensor& channel_scores, const MarkerModule& module) {
  require(channel_scores.rank() == 1, "module_score: scores must be rank 1");
  require(!module.members.empty(), "module_score: empty module");
  std::vector<double> vals;
  for (int m : module.members) {
    require(m >= 0 && m < channel_scores.dim(0), "module_score: member out of range");
    vals.push_back(channel_scores.at(m));
  }
  std::sort(vals.begin(), vals.end(), std::greater<double>());
  const size_t top = std::min<size_t>(3, vals.size());
  double s = 0.0;
  for (size_t i = 0; i < top; ++i) s += vals[i];
  return s / static_cast<double>(top);
}

PhenotypeAssignment assign_phenotype(const Tensor& channel_scores,
                                     const std::vector<MarkerModule>& modules) {
  require(!modules.empty(), "assign: no modules declared");
  PhenotypeAssignment a;
  for (const auto& m : modules) a.module_scores.push_back(module_score(channel_scores, m));
  a.chosen = 0;
  for (size_t i = 1; i < a.module_scores.size(); ++i)
    if (a.module_scores[i] > a.module_scores[static_cast<size_t>(a.chosen)])
      a.chosen = static_cast<int>(i);
  if (a.module_scores.size() == 1) {
    a.margin = a.module_scores[0];
  } else {
    double second = -1e300;
    for (size_t i = 0; i < a.module_scores.size(); ++i) {
      if (static_cast<int>(i) == a.chosen) continue;
      second = std::max(second, a.module_scores[i]);
      if (a.module_scores[i] == a.module_scores[static_cast<size_t>(a.chosen)]) a.tie = true;
    }
    a.margin = a.module_scores[static_cast<size_t>(a.chosen)] - second;
  }
  return a;
}

PhenotypingResult phenotype_patches(CimModel& model, const Tensor& patches,
                                    const std::vector<MarkerModule>& modules,
                                    const LrpConfig& cfg) {
  require(patches.rank() == 4, "phenotype: patches must be [N,C,H,W]");
  const int n = patches.dim(0), c = patches.dim(1), h = patches.dim(2), w = patches.dim(3);
  const size_t chw = static_cast<size_t>(c) * h * w;
  PhenotypingResult out;
  const int chunk = 64;
  for (int start = 0; start < n; start += chunk) {
    const int m = std::min(chunk, n - start);
    Tensor part({m, c, h, w});
    std::copy_n(patches.data.begin() + static_cast<ptrdiff_t>(chw * static_cast<size_t>(start)),
                chw * static_cast<size_t>(m), part.data.begin());
    const std::vector<RelevanceMap> maps = lrp_explain_batch(model, part, cfg);
    for (int i = 0; i < m; ++i) {
      Tensor patch({c, h, w});
      std::copy_n(part.data.begin() + static_cast<ptrdiff_t>(chw * static_cast<size_t>(i)), chw,
                  patch.data.begin());
      Tensor scores = aggregate_channel_relevance(maps[static_cast<size_t>(i)].values, patch,
                                                  cfg.tau_noise, cfg.percentile);
      PhenotypeAssignment a = assign_phenotype(scores, modules);
      a.patch_id = start + i;
      out.assignments.push_back(std::move(a));
      out.channel_scores.push_back(std::move(scores));
    }
  }
  return out;
}

GroupSeparability group_separability(const Tensor& patches, const std::vector<int>& members,
                                     const std::vector<Tensor>& channel_scores, int marker_a,
                                     int marker_b) {
  require(patches.rank() == 4, "separability: patches must be [N,C,H,W]");
  require(members.size() >= 2, "separability: need at least two cells in the group");
  const int c = patches.dim(1);
  require(marker_a >= 0 && marker_a < c && marker_b >= 0 && marker_b < c,
          "separability: marker index out of range");
  const double hw = static_cast<double>(patches.dim(2)) * patches.dim(3);
  std::vector<double> int_a, int_b, rel_a, rel_b;
  for (int i : members) {
    require(i >= 0 && i < patches.dim(0), "separability: member out of range");
    require(static_cast<size_t>(i) < channel_scores.size(),
            "separability: missing channel scores for member");
    double sa = 0.0, sb = 0.0;
    for (int y = 0; y < patches.dim(2); ++y)
      for (int x = 0; x < patches.dim(3); ++x) {
        sa += patches.at(i, marker_a, y, x);
        sb += patches.at(i, marker_b, y, x);
      }
    int_a.push_back(sa / hw);
    int_b.push_back(sb / hw);
    rel_a.push_back(channel_scores[static_cast<size_t>(i)].at(marker_a));
    rel_b.push_back(channel_scores[static_cast<size_t>(i)].at(marker_b));
  }
  // intensities and relevance scores live on different scales, so each
  // representation is min-max rescaled over its pooled pair of samples; the
  // distances then measure separation relative to the observed dynamic range
  // and can be compared across the two spaces
  const auto span_normalize = [](std::vector<double>& a, std::vector<double>& b) {
    double lo = a[0], hi = a[0];
    for (double v : a) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : b) lo = std::min(lo, v), hi = std::max(hi, v);
    if (hi <= lo) return;
    for (double& v : a) v = (v - lo) / (hi - lo);
    for (double& v : b) v = (v - lo) / (hi - lo);
  };
  span_normalize(int_a, int_b);
  span_normalize(rel_a, rel_b);

  GroupSeparability g;
  g.count = static_cast<int>(members.size());
  g.intensity_wd = wasserstein_1d(int_a, int_b);
  g.relevance_wd = wasserstein_1d(rel_a, rel_b);
  return g;
}

void save_relevance_maps(const std::string& path, const std::vector<RelevanceMap>& maps,
                         const std::vector<int>& patch_ids) {
  require(!maps.empty(), "save maps: nothing to write");
  require(maps.size() == patch_ids.size(), "save maps: one patch id per map required");
  for (const auto& m : maps)
    require(m.values.shape == maps[0].values.shape, "save maps: inconsistent map shapes");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("RLVM", 4);
  wire::put_u32(os, 1);
  wire::put_u32(os, static_cast<uint32_t>(maps.size()));
  for (int d = 0; d < 3; ++d) wire::put_u32(os, static_cast<uint32_t>(maps[0].values.dim(d)));
  for (const auto& m : maps)
    for (double v : m.values.data) wire::put_f32(os, static_cast<float>(v));
  for (int id : patch_ids) wire::put_i32(os, id);
  if (!os) throw IoError("write failed: " + path);
}

RelevanceMapsFile load_relevance_maps(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open relevance maps: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RLVM", 4) != 0)
    throw IoError("bad magic in relevance maps: " + path);
  if (wire::get_u32(is, "version") != 1)
    throw IoError("unsupported relevance map version in " + path);
  int dims[4];
  for (int& d : dims) {
    d = static_cast<int>(wire::get_u32(is, "extent"));
    if (d <= 0) throw IoError("invalid extent in " + path);
  }
  RelevanceMapsFile f;
  f.maps = Tensor({dims[0], dims[1], dims[2], dims[3]});
  for (double& v : f.maps.data) v = static_cast<double>(wire::get_f32(is, "map payload"));
  f.patch_ids.resize(static_cast<size_t>(dims[0]));
  for (int& id : f.patch_ids) id = wire::get_i32(is, "patch ids");
  return f;
}

}  // namespace cimlite
