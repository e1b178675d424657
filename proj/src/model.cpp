#include "cimlite/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "cimlite/errors.hpp"
#include "cimlite/serialize.hpp"
#include <json.hpp>

namespace cimlite {

using nlohmann::json;

void CimConfig::validate() const {
  require(markers >= 1, "config: markers must be >= 1");
  require(width >= 1, "config: width must be >= 1");
  require(depth >= 0, "config: depth must be >= 0");
  require(se_reduction == 1 || se_reduction == 2, "config: se_reduction must be 1 or 2");
  require(width % se_reduction == 0, "config: width must be divisible by se_reduction");
  require(input_hw >= 4, "config: input size must be >= 4");
  require(proj_dim >= 1 && head_hidden >= 1, "config: head sizes must be >= 1");
  require(classes >= 2, "config: need at least 2 classes");
}

CimConfig CimConfig::cim_s(int markers, int classes, uint64_t seed) {
  CimConfig c;
  c.markers = markers;
  c.width = 4;
  c.depth = 1;
  c.se_reduction = 2;
  c.classes = classes;
  c.seed = seed;
  if (markers >= 32) {
    c.proj_dim = 16;
    c.head_hidden = 16;
  }
  return c;
}

std::string CimConfig::to_json() const {
  json j;
  j["markers"] = markers;
  j["width"] = width;
  j["depth"] = depth;
  j["se_reduction"] = se_reduction;
  j["input_hw"] = input_hw;
  j["proj_dim"] = proj_dim;
  j["classes"] = classes;
  j["head_hidden"] = head_hidden;
  j["seed"] = seed;
  return j.dump(2);
}

CimConfig CimConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  CimConfig c;
  try {
    c.markers = j.value("markers", c.markers);
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
    c.se_reduction = j.value("se_reduction", c.se_reduction);
    c.input_hw = j.value("input_hw", c.input_hw);
    c.proj_dim = j.value("proj_dim", c.proj_dim);
    c.classes = j.value("classes", c.classes);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: bad field type: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

Tensor kaiming_conv(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  return Tensor::rand_uniform(std::move(shape), rng, -bound, bound);
}

Tensor conv_bias(int n, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::rand_uniform({n}, rng, -bound, bound);
}

Tensor kaiming_linear(int dout, int din, Rng& rng) {
  const double bound = std::sqrt(6.0 / din);
  return Tensor::rand_uniform({dout, din}, rng, -bound, bound);
}

Tensor slice1(const Tensor& t, int r0, int r1) {
  Tensor out({r1 - r0});
  std::copy(t.data.begin() + r0, t.data.begin() + r1, out.data.begin());
  return out;
}

Tensor slice_rows4(const Tensor& t, int r0, int r1) {
  const size_t row = t.data.size() / static_cast<size_t>(t.dim(0));
  Tensor out({r1 - r0, t.dim(1), t.dim(2), t.dim(3)});
  std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(r0 * row),
            t.data.begin() + static_cast<std::ptrdiff_t>(r1 * row), out.data.begin());
  return out;
}

}  // namespace

CimModel CimModel::build(const CimConfig& cfg) {
  cfg.validate();
  CimModel m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const int C = cfg.markers, k = cfg.width, r = cfg.se_reduction;
  const int ck = C * k;

  m.stem_w = kaiming_conv({ck, 1, 1, 1}, 1, rng);
  m.stem_b = conv_bias(ck, 1, rng);
  m.stem_bn_g = Tensor::full({ck}, 1.0);
  m.stem_bn_b = Tensor::zeros({ck});
  m.stem_bn = BnStats::make(ck);

  m.blocks.resize(static_cast<size_t>(cfg.depth));
  for (auto& b : m.blocks) {
    b.dw_w = kaiming_conv({ck, 1, 3, 3}, 9, rng);
    b.dw_b = conv_bias(ck, 9, rng);
    b.bn1_g = Tensor::full({ck}, 1.0);
    b.bn1_b = Tensor::zeros({ck});
    b.bn1 = BnStats::make(ck);
    b.se_w1 = kaiming_conv({C * (k / r), k, 1, 1}, k, rng);
    b.se_b1 = conv_bias(C * (k / r), k, rng);
    b.se_w2 = kaiming_conv({ck, k / r, 1, 1}, k / r, rng);
    b.se_b2 = conv_bias(ck, k / r, rng);
    b.g1_w = kaiming_conv({ck, k, 1, 1}, k, rng);
    b.g1_b = conv_bias(ck, k, rng);
    b.bn2_g = Tensor::full({ck}, 1.0);
    b.bn2_b = Tensor::zeros({ck});
    b.bn2 = BnStats::make(ck);
  }

  m.proj_w1 = kaiming_linear(cfg.proj_dim, ck, rng);
  m.proj_b1 = Tensor::zeros({cfg.proj_dim});
  m.proj_w2 = kaiming_linear(cfg.proj_dim, cfg.proj_dim, rng);
  m.proj_b2 = Tensor::zeros({cfg.proj_dim});
  m.cls_w1 = kaiming_linear(cfg.head_hidden, ck, rng);
  m.cls_b1 = Tensor::zeros({cfg.head_hidden});
  m.cls_w2 = kaiming_linear(cfg.classes, cfg.head_hidden, rng);
  m.cls_b2 = Tensor::zeros({cfg.classes});
  return m;
}

std::vector<ParamRef> CimModel::parameters() {
  std::vector<ParamRef> ps;
  ps.push_back({"stem.w", &stem_w, false});
  ps.push_back({"stem.b", &stem_b, true});
  ps.push_back({"stem.bn.g", &stem_bn_g, true});
  ps.push_back({"stem.bn.b", &stem_bn_b, true});
  for (size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    ps.push_back({p + "dw.w", &b.dw_w, false});
    ps.push_back({p + "dw.b", &b.dw_b, true});
    ps.push_back({p + "bn1.g", &b.bn1_g, true});
    ps.push_back({p + "bn1.b", &b.bn1_b, true});
    ps.push_back({p + "se.w1", &b.se_w1, false});
    ps.push_back({p + "se.b1", &b.se_b1, true});
    ps.push_back({p + "se.w2", &b.se_w2, false});
    ps.push_back({p + "se.b2", &b.se_b2, true});
    ps.push_back({p + "g1.w", &b.g1_w, false});
    ps.push_back({p + "g1.b", &b.g1_b, true});
    ps.push_back({p + "bn2.g", &b.bn2_g, true});
    ps.push_back({p + "bn2.b", &b.bn2_b, true});
  }
  ps.push_back({"proj.w1", &proj_w1, false});
  ps.push_back({"proj.b1", &proj_b1, true});
  ps.push_back({"proj.w2", &proj_w2, false});
  ps.push_back({"proj.b2", &proj_b2, true});
  ps.push_back({"cls.w1", &cls_w1, false});
  ps.push_back({"cls.b1", &cls_b1, true});
  ps.push_back({"cls.w2", &cls_w2, false});
  ps.push_back({"cls.b2", &cls_b2, true});
  return ps;
}

std::vector<int> CimModel::bind(Tape& t) {
  std::vector<int> ids;
  for (auto& p : parameters()) ids.push_back(t.push(*p.value));
  return ids;
}

std::vector<Tensor*> CimModel::state_tensors() {
  std::vector<Tensor*> ts;
  for (auto& p : parameters()) ts.push_back(p.value);
  ts.push_back(&stem_bn.mean);
  ts.push_back(&stem_bn.var);
  for (auto& b : blocks) {
    ts.push_back(&b.bn1.mean);
    ts.push_back(&b.bn1.var);
    ts.push_back(&b.bn2.mean);
    ts.push_back(&b.bn2.var);
  }
  return ts;
}

int CimModel::features(Tape& t, const std::vector<int>& ids, int input, Mode mode) {
  const Tensor& x = t.val(input);
  require(x.rank() == 4 && x.dim(1) == cfg.markers,
          "features: input must be [N," + std::to_string(cfg.markers) + ",H,W]");
  const int C = cfg.markers, k = cfg.width;
  const int n = x.dim(0), ck = C * k;
  size_t pi = 0;
  auto next = [&ids, &pi]() { return ids[pi++]; };

  int id_stem_w = next(), id_stem_b = next(), id_sbn_g = next(), id_sbn_b = next();
  int cur = t.conv2d_grouped(input, id_stem_w, id_stem_b, C, 1, 0);
  cur = t.relu(t.batchnorm2d(cur, id_sbn_g, id_sbn_b, &stem_bn, mode));

  for (auto& b : blocks) {
    int id_dw_w = next(), id_dw_b = next(), id_bn1_g = next(), id_bn1_b = next();
    int id_se_w1 = next(), id_se_b1 = next(), id_se_w2 = next(), id_se_b2 = next();
    int id_g1_w = next(), id_g1_b = next(), id_bn2_g = next(), id_bn2_b = next();

    int residual = cur;
    int a = t.depthwise_conv2d(cur, id_dw_w, id_dw_b, 1);
    a = t.relu(t.batchnorm2d(a, id_bn1_g, id_bn1_b, &b.bn1, mode));

    int sq = t.reshape(t.global_avg_pool(a), {n, ck, 1, 1});
    int gate = t.relu(t.conv2d_grouped(sq, id_se_w1, id_se_b1, C, 1, 0));
    gate = t.sigmoid(t.conv2d_grouped(gate, id_se_w2, id_se_b2, C, 1, 0));
    int gated = t.scale_channels(a, t.reshape(gate, {n, ck}));

    int p = t.conv2d_grouped(gated, id_g1_w, id_g1_b, C, 1, 0);
    p = t.batchnorm2d(p, id_bn2_g, id_bn2_b, &b.bn2, mode);
    cur = t.relu(t.add(p, residual));
  }
  prefusion_ = cur;
  return t.global_avg_pool(cur);
}

int CimModel::projection(Tape& t, const std::vector<int>& ids, int pooled) {
  const size_t base = 4 + blocks.size() * 12;
  int h = t.relu(t.linear(pooled, ids[base], ids[base + 1]));
  return t.linear(h, ids[base + 2], ids[base + 3]);
}

int CimModel::classifier(Tape& t, const std::vector<int>& ids, int pooled) {
  const size_t base = 4 + blocks.size() * 12 + 4;
  int h = t.relu(t.linear(pooled, ids[base], ids[base + 1]));
  return t.linear(h, ids[base + 2], ids[base + 3]);
}

ParamCounts CimModel::counts() const {
  ParamCounts c;
  auto ps = const_cast<CimModel*>(this)->parameters();
  for (const auto& p : ps) {
    const int64_t n = p.value->numel();
    if (p.name.rfind("proj.", 0) == 0)
      c.projection += n;
    else if (p.name.rfind("cls.", 0) == 0)
      c.classifier += n;
    else
      c.backbone += n;
  }
  return c;
}

CimModel CimModel::slice_marker(int c) const {
  require(c >= 0 && c < cfg.markers, "slice_marker: marker index out of range");
  CimConfig c1 = cfg;
  c1.markers = 1;
  CimModel m = build(c1);
  const int k = cfg.width, kr = cfg.width / cfg.se_reduction;

  m.stem_w = slice_rows4(stem_w, c * k, (c + 1) * k);
  m.stem_b = slice1(stem_b, c * k, (c + 1) * k);
  m.stem_bn_g = slice1(stem_bn_g, c * k, (c + 1) * k);
  m.stem_bn_b = slice1(stem_bn_b, c * k, (c + 1) * k);
  m.stem_bn.mean = slice1(stem_bn.mean, c * k, (c + 1) * k);
  m.stem_bn.var = slice1(stem_bn.var, c * k, (c + 1) * k);

  for (size_t i = 0; i < blocks.size(); ++i) {
    const auto& src = blocks[i];
    auto& dst = m.blocks[i];
    dst.dw_w = slice_rows4(src.dw_w, c * k, (c + 1) * k);
    dst.dw_b = slice1(src.dw_b, c * k, (c + 1) * k);
    dst.bn1_g = slice1(src.bn1_g, c * k, (c + 1) * k);
    dst.bn1_b = slice1(src.bn1_b, c * k, (c + 1) * k);
    dst.bn1.mean = slice1(src.bn1.mean, c * k, (c + 1) * k);
    dst.bn1.var = slice1(src.bn1.var, c * k, (c + 1) * k);
    dst.se_w1 = slice_rows4(src.se_w1, c * kr, (c + 1) * kr);
    dst.se_b1 = slice1(src.se_b1, c * kr, (c + 1) * kr);
    dst.se_w2 = slice_rows4(src.se_w2, c * k, (c + 1) * k);
    dst.se_b2 = slice1(src.se_b2, c * k, (c + 1) * k);
    dst.g1_w = slice_rows4(src.g1_w, c * k, (c + 1) * k);
    dst.g1_b = slice1(src.g1_b, c * k, (c + 1) * k);
    dst.bn2_g = slice1(src.bn2_g, c * k, (c + 1) * k);
    dst.bn2_b = slice1(src.bn2_b, c * k, (c + 1) * k);
    dst.bn2.mean = slice1(src.bn2.mean, c * k, (c + 1) * k);
    dst.bn2.var = slice1(src.bn2.var, c * k, (c + 1) * k);
  }
  return m;
}

Tensor Encoder::embed(const Tensor& x) {
  require(x.rank() == 4, "embed: input must be rank 4");
  const int n = x.dim(0);
  const int chunk = 64;
  Tensor out({n, feat_dim()});
  for (int start = 0; start < n; start += chunk) {
    const int stop = std::min(n, start + chunk);
    Tensor part({stop - start, x.dim(1), x.dim(2), x.dim(3)});
    std::copy(x.data.begin() + static_cast<size_t>(start) * x.dim(1) * x.dim(2) * x.dim(3),
              x.data.begin() + static_cast<size_t>(stop) * x.dim(1) * x.dim(2) * x.dim(3),
              part.data.begin());
    Tape t;
    auto ids = bind(t);
    int pooled = features(t, ids, t.push(std::move(part)), Mode::eval);
    const Tensor& emb = t.val(pooled);
    std::copy(emb.data.begin(), emb.data.end(),
              out.data.begin() + static_cast<size_t>(start) * feat_dim());
  }
  return out;
}

namespace {

// weights, then running stats, then a numeric config record
void append_stats(std::vector<NamedTensor>& out, const std::string& name,
                  const BnStats& s) {
  out.push_back({"stats." + name + ".mean", s.mean});
  out.push_back({"stats." + name + ".var", s.var});
}

std::map<std::string, Tensor> to_map(std::vector<NamedTensor> v) {
  std::map<std::string, Tensor> m;
  for (auto& nt : v) m[nt.name] = std::move(nt.tensor);
  return m;
}

const Tensor& pick(const std::map<std::string, Tensor>& m, const std::string& name,
                   const std::string& path) {
  auto it = m.find(name);
  if (it == m.end()) throw IoError("weight file " + path + " is missing tensor " + name);
  return it->second;
}

}  // namespace

void CimModel::save(const std::string& path) const {
  std::vector<NamedTensor> ts;
  auto ps = const_cast<CimModel*>(this)->parameters();
  for (auto& p : ps) ts.push_back({p.name, *p.value});
  append_stats(ts, "stem.bn", stem_bn);
  for (size_t i = 0; i < blocks.size(); ++i) {
    append_stats(ts, "block" + std::to_string(i) + ".bn1", blocks[i].bn1);
    append_stats(ts, "block" + std::to_string(i) + ".bn2", blocks[i].bn2);
  }
  Tensor meta = Tensor::from(
      {9}, {1.0, static_cast<double>(cfg.markers), static_cast<double>(cfg.width),
            static_cast<double>(cfg.depth), static_cast<double>(cfg.se_reduction),
            static_cast<double>(cfg.input_hw), static_cast<double>(cfg.proj_dim),
            static_cast<double>(cfg.classes), static_cast<double>(cfg.head_hidden)});
  ts.push_back({"meta.config", meta});
  save_weights(path, ts);
}

CimModel CimModel::load(const std::string& path) {
  auto m = to_map(load_weights(path));
  const Tensor& meta = pick(m, "meta.config", path);
  if (meta.numel() != 9 || meta.at(0) != 1.0)
    throw IoError("weight file " + path + " does not hold a channel-independent model");
  CimConfig cfg;
  cfg.markers = static_cast<int>(meta.at(1));
  cfg.width = static_cast<int>(meta.at(2));
  cfg.depth = static_cast<int>(meta.at(3));
  cfg.se_reduction = static_cast<int>(meta.at(4));
  cfg.input_hw = static_cast<int>(meta.at(5));
  cfg.proj_dim = static_cast<int>(meta.at(6));
  cfg.classes = static_cast<int>(meta.at(7));
  cfg.head_hidden = static_cast<int>(meta.at(8));
  cfg.seed = 0;
  CimModel model = build(cfg);
  for (auto& p : model.parameters()) {
    const Tensor& t = pick(m, p.name, path);
    require(t.same_shape(*p.value), "loaded tensor shape mismatch for " + p.name);
    *p.value = t;
  }
  auto load_stats = [&](const std::string& name, BnStats& s) {
    s.mean = pick(m, "stats." + name + ".mean", path);
    s.var = pick(m, "stats." + name + ".var", path);
    s.initialized = true;
  };
  load_stats("stem.bn", model.stem_bn);
  for (size_t i = 0; i < model.blocks.size(); ++i) {
    load_stats("block" + std::to_string(i) + ".bn1", model.blocks[i].bn1);
    load_stats("block" + std::to_string(i) + ".bn2", model.blocks[i].bn2);
  }
  return model;
}

void FusionConfig::validate() const {
  require(channels >= 1 && width >= 1, "config: channels and width must be >= 1");
  require(input_hw >= 4, "config: input size must be >= 4");
  require(proj_dim >= 1 && head_hidden >= 1 && classes >= 2, "config: bad head sizes");
}

FusionModel FusionModel::build(const FusionConfig& cfg) {
  cfg.validate();
  FusionModel m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const int C = cfg.channels, w = cfg.width;

  m.c1_w = kaiming_conv({w, C, 3, 3}, C * 9, rng);
  m.c1_b = conv_bias(w, C * 9, rng);
  m.bn0_g = Tensor::full({w}, 1.0);
  m.bn0_b = Tensor::zeros({w});
  m.bn0 = BnStats::make(w);
  m.r1_w = kaiming_conv({w, w, 3, 3}, w * 9, rng);
  m.r1_b = conv_bias(w, w * 9, rng);
  m.rbn1_g = Tensor::full({w}, 1.0);
  m.rbn1_b = Tensor::zeros({w});
  m.rbn1 = BnStats::make(w);
  m.r2_w = kaiming_conv({w, w, 3, 3}, w * 9, rng);
  m.r2_b = conv_bias(w, w * 9, rng);
  m.rbn2_g = Tensor::full({w}, 1.0);
  m.rbn2_b = Tensor::zeros({w});
  m.rbn2 = BnStats::make(w);

  m.proj_w1 = kaiming_linear(cfg.proj_dim, w, rng);
  m.proj_b1 = Tensor::zeros({cfg.proj_dim});
  m.proj_w2 = kaiming_linear(cfg.proj_dim, cfg.proj_dim, rng);
  m.proj_b2 = Tensor::zeros({cfg.proj_dim});
  m.cls_w1 = kaiming_linear(cfg.head_hidden, w, rng);
  m.cls_b1 = Tensor::zeros({cfg.head_hidden});
  m.cls_w2 = kaiming_linear(cfg.classes, cfg.head_hidden, rng);
  m.cls_b2 = Tensor::zeros({cfg.classes});
  return m;
}

std::vector<ParamRef> FusionModel::parameters() {
  return {
      {"c1.w", &c1_w, false},        {"c1.b", &c1_b, true},
      {"bn0.g", &bn0_g, true},       {"bn0.b", &bn0_b, true},
      {"r1.w", &r1_w, false},        {"r1.b", &r1_b, true},
      {"rbn1.g", &rbn1_g, true},     {"rbn1.b", &rbn1_b, true},
      {"r2.w", &r2_w, false},        {"r2.b", &r2_b, true},
      {"rbn2.g", &rbn2_g, true},     {"rbn2.b", &rbn2_b, true},
      {"proj.w1", &proj_w1, false},  {"proj.b1", &proj_b1, true},
      {"proj.w2", &proj_w2, false},  {"proj.b2", &proj_b2, true},
      {"cls.w1", &cls_w1, false},    {"cls.b1", &cls_b1, true},
      {"cls.w2", &cls_w2, false},    {"cls.b2", &cls_b2, true},
  };
}

std::vector<int> FusionModel::bind(Tape& t) {
  std::vector<int> ids;
  for (auto& p : parameters()) ids.push_back(t.push(*p.value));
  return ids;
}

std::vector<Tensor*> FusionModel::state_tensors() {
  std::vector<Tensor*> ts;
  for (auto& p : parameters()) ts.push_back(p.value);
  for (BnStats* s : {&bn0, &rbn1, &rbn2}) {
    ts.push_back(&s->mean);
    ts.push_back(&s->var);
  }
  return ts;
}

int FusionModel::features(Tape& t, const std::vector<int>& ids, int input, Mode mode) {
  const Tensor& x = t.val(input);
  require(x.rank() == 4 && x.dim(1) == cfg.channels,
          "features: input must be [N," + std::to_string(cfg.channels) + ",H,W]");
  int cur = t.conv2d_grouped(input, ids[0], ids[1], 1, 1, 1);
  cur = t.relu(t.batchnorm2d(cur, ids[2], ids[3], &bn0, mode));
  int residual = cur;
  int a = t.conv2d_grouped(cur, ids[4], ids[5], 1, 1, 1);
  a = t.relu(t.batchnorm2d(a, ids[6], ids[7], &rbn1, mode));
  a = t.conv2d_grouped(a, ids[8], ids[9], 1, 1, 1);
  a = t.batchnorm2d(a, ids[10], ids[11], &rbn2, mode);
  cur = t.relu(t.add(a, residual));
  return t.global_avg_pool(cur);
}

int FusionModel::projection(Tape& t, const std::vector<int>& ids, int pooled) {
  int h = t.relu(t.linear(pooled, ids[12], ids[13]));
  return t.linear(h, ids[14], ids[15]);
}

int FusionModel::classifier(Tape& t, const std::vector<int>& ids, int pooled) {
  int h = t.relu(t.linear(pooled, ids[16], ids[17]));
  return t.linear(h, ids[18], ids[19]);
}

ParamCounts FusionModel::counts() const {
  ParamCounts c;
  auto ps = const_cast<FusionModel*>(this)->parameters();
  for (const auto& p : ps) {
    const int64_t n = p.value->numel();
    if (p.name.rfind("proj.", 0) == 0)
      c.projection += n;
    else if (p.name.rfind("cls.", 0) == 0)
      c.classifier += n;
    else
      c.backbone += n;
  }
  return c;
}

void FusionModel::save(const std::string& path) const {
  std::vector<NamedTensor> ts;
  auto ps = const_cast<FusionModel*>(this)->parameters();
  for (auto& p : ps) ts.push_back({p.name, *p.value});
  append_stats(ts, "bn0", bn0);
  append_stats(ts, "rbn1", rbn1);
  append_stats(ts, "rbn2", rbn2);
  Tensor meta = Tensor::from(
      {7}, {2.0, static_cast<double>(cfg.channels), static_cast<double>(cfg.width),
            static_cast<double>(cfg.input_hw), static_cast<double>(cfg.proj_dim),
            static_cast<double>(cfg.classes), static_cast<double>(cfg.head_hidden)});
  ts.push_back({"meta.config", meta});
  save_weights(path, ts);
}

FusionModel FusionModel::load(const std::string& path) {
  auto m = to_map(load_weights(path));
  const Tensor& meta = pick(m, "meta.config", path);
  if (meta.numel() != 7 || meta.at(0) != 2.0)
    throw IoError("weight file " + path + " does not hold an early-fusion model");
  FusionConfig cfg;
  cfg.channels = static_cast<int>(meta.at(1));
  cfg.width = static_cast<int>(meta.at(2));
  cfg.input_hw = static_cast<int>(meta.at(3));
  cfg.proj_dim = static_cast<int>(meta.at(4));
  cfg.classes = static_cast<int>(meta.at(5));
  cfg.head_hidden = static_cast<int>(meta.at(6));
  cfg.seed = 0;
  FusionModel model = build(cfg);
  for (auto& p : model.parameters()) {
    const Tensor& t = pick(m, p.name, path);
    require(t.same_shape(*p.value), "loaded tensor shape mismatch for " + p.name);
    *p.value = t;
  }
  auto load_stats = [&](const std::string& name, BnStats& s) {
    s.mean = pick(m, "stats." + name + ".mean", path);
    s.var = pick(m, "stats." + name + ".var", path);
    s.initialized = true;
  };
  load_stats("bn0", model.bn0);
  load_stats("rbn1", model.rbn1);
  load_stats("rbn2", model.rbn2);
  return model;
}

}  // namespace cimlite
