#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cimlite/tape.hpp"
#include "cimlite/tensor.hpp"

namespace cimlite {

struct CimConfig {
  int markers = 8;       // C, one group per marker
  int width = 4;         // k feature maps per marker
  int depth = 1;         // N channel-independent blocks
  int se_reduction = 2;  // r, SE bottleneck k -> k/r -> k
  int input_hw = 24;
  int proj_dim = 64;     // SSL projection head: C*k -> proj_dim -> proj_dim
  int classes = 6;
  int head_hidden = 64;  // supervised classifier: C*k -> head_hidden -> classes
  uint64_t seed = 1;

  int feat_dim() const { return markers * width; }
  void validate() const;

  // The published shallow preset: N=1, k=4. Head widths shrink on wide panels
  // so the whole model stays under 10^4 scalars.
  static CimConfig cim_s(int markers, int classes = 6, uint64_t seed = 1);

  std::string to_json() const;
  static CimConfig from_json(const std::string& text);
};

struct ParamRef {
  std::string name;
  Tensor* value;
  bool exempt;  // BN scale/shift and all biases: no weight decay, no LARS adaptation
};

struct ParamCounts {
  int64_t backbone = 0;
  int64_t projection = 0;
  int64_t classifier = 0;
  int64_t total() const { return backbone + projection + classifier; }
};

// Common surface shared by the channel-independent model and the early-fusion
// baseline so training and evaluation code handles both. bind() pushes every
// parameter onto the tape once (same order as parameters()) so gradients from
// any number of forward passes accumulate per parameter.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::vector<ParamRef> parameters() = 0;
  virtual std::vector<int> bind(Tape& t) = 0;
  virtual int features(Tape& t, const std::vector<int>& ids, int input, Mode mode) = 0;
  virtual int projection(Tape& t, const std::vector<int>& ids, int pooled) = 0;
  virtual int classifier(Tape& t, const std::vector<int>& ids, int pooled) = 0;
  virtual int feat_dim() const = 0;
  virtual int channels() const = 0;
  virtual void save(const std::string& path) const = 0;
  // every tensor making up model state: parameters plus BN running stats;
  // lets callers snapshot and restore (best-epoch selection)
  virtual std::vector<Tensor*> state_tensors() = 0;

  // eval-mode pooled embeddings, no gradient bookkeeping kept afterwards
  Tensor embed(const Tensor& x);
};

struct CimBlock {
  Tensor dw_w, dw_b;  // depthwise 3x3
  Tensor bn1_g, bn1_b;
  BnStats bn1;
  Tensor se_w1, se_b1;  // per-marker squeeze: k -> k/r
  Tensor se_w2, se_b2;  // k/r -> k
  Tensor g1_w, g1_b;  // grouped 1x1 refinement
  Tensor bn2_g, bn2_b;
  BnStats bn2;
};

class CimModel : public Encoder {
 public:
  CimConfig cfg;
  Tensor stem_w, stem_b;  // grouped 1x1, g = C, k filters per marker
  Tensor stem_bn_g, stem_bn_b;
  BnStats stem_bn;
  std::vector<CimBlock> blocks;
  Tensor proj_w1, proj_b1, proj_w2, proj_b2;
  Tensor cls_w1, cls_b1, cls_w2, cls_b2;

  static CimModel build(const CimConfig& cfg);

  std::vector<ParamRef> parameters() override;
  std::vector<int> bind(Tape& t) override;
  int features(Tape& t, const std::vector<int>& ids, int input, Mode mode) override;
  int projection(Tape& t, const std::vector<int>& ids, int pooled) override;
  int classifier(Tape& t, const std::vector<int>& ids, int pooled) override;
  int feat_dim() const override { return cfg.feat_dim(); }
  int channels() const override { return cfg.markers; }
  std::vector<Tensor*> state_tensors() override;

  // feature map before pooling, for relevance propagation
  int last_prefusion() const { return prefusion_; }

  ParamCounts counts() const;

  // C=1 model carrying marker c's slice of every backbone tensor; reproduces
  // feature block c of the full model exactly
  CimModel slice_marker(int c) const;

  void save(const std::string& path) const override;
  static CimModel load(const std::string& path);

 private:
  int prefusion_ = -1;
};

struct FusionConfig {
  int channels = 8;
  int width = 10;  // sized so parameters land within 2x of the CIM-S totals
  int input_hw = 24;
  int proj_dim = 64;
  int classes = 6;
  int head_hidden = 64;
  uint64_t seed = 1;
  void validate() const;
};

// Conventional small CNN: full-mixing 3x3 stem, one standard residual block,
// GAP, same head shapes. The first layer mixes all markers.
class FusionModel : public Encoder {
 public:
  FusionConfig cfg;
  Tensor c1_w, c1_b, bn0_g, bn0_b;
  BnStats bn0;
  Tensor r1_w, r1_b, rbn1_g, rbn1_b;
  BnStats rbn1;
  Tensor r2_w, r2_b, rbn2_g, rbn2_b;
  BnStats rbn2;
  Tensor proj_w1, proj_b1, proj_w2, proj_b2;
  Tensor cls_w1, cls_b1, cls_w2, cls_b2;

  static FusionModel build(const FusionConfig& cfg);

  std::vector<ParamRef> parameters() override;
  std::vector<int> bind(Tape& t) override;
  int features(Tape& t, const std::vector<int>& ids, int input, Mode mode) override;
  int projection(Tape& t, const std::vector<int>& ids, int pooled) override;
  int classifier(Tape& t, const std::vector<int>& ids, int pooled) override;
  int feat_dim() const override { return cfg.width; }
  int channels() const override { return cfg.channels; }
  std::vector<Tensor*> state_tensors() override;

  ParamCounts counts() const;

  void save(const std::string& path) const override;
  static FusionModel load(const std::string& path);
};

}  // namespace cimlite
