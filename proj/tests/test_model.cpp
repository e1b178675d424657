#include <cstdio>
#include <vector>

#include "cimlite/model.hpp"
#include "cimlite/rng.hpp"
#include "cimlite/serialize.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cimlite;
using oracles::max_abs_diff;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, sd);
}

Tensor patch_batch(int n, int c, int hw, uint64_t seed) {
  Rng rng(seed);
  return Tensor::rand_uniform({n, c, hw, hw}, rng, 0.0, 1.0);
}

std::string tmp_path(const char* name) {
  return std::string("/tmp/cimlite_test_") + name;
}

}  // namespace

TEST_CASE("CIM-S backbone parameter count matches the published budget") {
  CimModel m = CimModel::build(CimConfig::cim_s(49));
  ParamCounts c = m.counts();
  CHECK(c.backbone >= 4500);
  CHECK(c.backbone <= 6500);
  CHECK(c.backbone == 5586);
  CHECK(c.total() - c.classifier < 10000);
  CHECK(c.total() - c.projection < 10000);
}

TEST_CASE("degenerate config C=1,k=1,N=0 has stem weight+bias plus stem BN") {
  CimConfig cfg;
  cfg.markers = 1;
  cfg.width = 1;
  cfg.depth = 0;
  cfg.se_reduction = 1;
  CimModel m = CimModel::build(cfg);
  CHECK(m.counts().backbone == 4);  // 1 weight + 1 bias + BN gamma + beta
  CHECK(m.stem_w.numel() == 1);
  CHECK(m.stem_b.numel() == 1);
}

TEST_CASE("parameter count equals enumerating the serialized file") {
  CimModel m = CimModel::build(CimConfig::cim_s(8));
  const std::string path = tmp_path("count.cimw");
  m.save(path);
  int64_t from_file = 0;
  for (const auto& nt : load_weights(path)) {
    if (nt.name.rfind("stats.", 0) == 0 || nt.name.rfind("meta.", 0) == 0) continue;
    from_file += nt.tensor.numel();
  }
  CHECK(from_file == m.counts().total());
  std::remove(path.c_str());
}

TEST_CASE("fixed seed gives identical serialized bytes across two builds") {
  const std::string pa = tmp_path("det_a.cimw"), pb = tmp_path("det_b.cimw");
  CimModel::build(CimConfig::cim_s(8, 6, 77)).save(pa);
  CimModel::build(CimConfig::cim_s(8, 6, 77)).save(pb);
  auto slurp = [](const std::string& p) {
    FILE* f = std::fopen(p.c_str(), "rb");
    REQUIRE(f != nullptr);
    std::vector<unsigned char> bytes;
    int ch;
    while ((ch = std::fgetc(f)) != EOF) bytes.push_back(static_cast<unsigned char>(ch));
    std::fclose(f);
    return bytes;
  };
  CHECK(slurp(pa) == slurp(pb));
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("all-zero input with zero biases pools to zero") {
  CimModel m = CimModel::build(CimConfig::cim_s(8));
  for (auto& p : m.parameters())
    if (p.name.find(".b") != std::string::npos && p.name.find("bn") == std::string::npos)
      for (auto& v : p.value->data) v = 0.0;
  Tape t;
  auto ids = m.bind(t);
  int pooled = m.features(t, ids, t.push(Tensor::zeros({2, 8, 24, 24})), Mode::eval);
  CHECK(t.val(pooled).abs_max() == 0.0);
}

TEST_CASE("channel independence: single-channel perturbations stay in their block") {
  CimModel m = CimModel::build(CimConfig::cim_s(8, 6, 5));
  // nudge BN stats off their initialization so eval mode is non-trivial
  {
    Tape warm;
    auto ids = m.bind(warm);
    m.features(warm, ids, warm.push(patch_batch(8, 8, 24, 901)), Mode::train);
  }
  const int k = m.cfg.width;
  Rng rng(902);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = patch_batch(2, 8, 24, 910 + trial);
    int c = static_cast<int>(rng.below(8));
    Tensor xp = x;
    for (int ni = 0; ni < 2; ++ni)
      for (int y = 0; y < 24; ++y)
        for (int xo = 0; xo < 24; ++xo)
          xp.at(ni, c, y, xo) += rng.uniform(-0.5, 0.5);

    Tape t1, t2;
    auto i1 = m.bind(t1);
    auto i2 = m.bind(t2);
    int p1 = m.features(t1, i1, t1.push(x), Mode::eval);
    int p2 = m.features(t2, i2, t2.push(xp), Mode::eval);
    bool outside_identical = true;
    bool inside_changed = false;
    for (int ni = 0; ni < 2; ++ni)
      for (int f = 0; f < m.feat_dim(); ++f) {
        const bool in_block = f >= c * k && f < (c + 1) * k;
        const double a = t1.val(p1).at(ni, f), b = t2.val(p2).at(ni, f);
        if (in_block && a != b) inside_changed = true;
        if (!in_block && a != b) outside_identical = false;
      }
    CHECK(outside_identical);
    CHECK(inside_changed);
  }
}

TEST_CASE("per-marker sub-network oracle reproduces each feature block") {
  CimModel m = CimModel::build(CimConfig::cim_s(8, 6, 19));
  {
    Tape warm;
    auto ids = m.bind(warm);
    m.features(warm, ids, warm.push(patch_batch(8, 8, 24, 921)), Mode::train);
  }
  Tensor x = patch_batch(3, 8, 24, 922);
  Tape t;
  auto ids = m.bind(t);
  int pooled = m.features(t, ids, t.push(x), Mode::eval);
  const int k = m.cfg.width;

  for (int c = 0; c < 8; ++c) {
    CimModel sub = m.slice_marker(c);
    Tensor xc({3, 1, 24, 24});
    for (int ni = 0; ni < 3; ++ni)
      for (int y = 0; y < 24; ++y)
        for (int xo = 0; xo < 24; ++xo) xc.at(ni, 0, y, xo) = x.at(ni, c, y, xo);
    Tape ts;
    auto sids = sub.bind(ts);
    int sp = sub.features(ts, sids, ts.push(xc), Mode::eval);
    for (int ni = 0; ni < 3; ++ni)
      for (int f = 0; f < k; ++f)
        CHECK(t.val(pooled).at(ni, c * k + f) == ts.val(sp).at(ni, f));
  }
}

TEST_CASE("SE gate: zero weights and biases halve the features") {
  CimConfig cfg = CimConfig::cim_s(4);
  CimModel m = CimModel::build(cfg);
  auto& b = m.blocks[0];
  for (auto* t : {&b.se_w1, &b.se_b1, &b.se_w2, &b.se_b2})
    for (auto& v : t->data) v = 0.0;
  // bypass the surrounding block arithmetic: recompute what features() does
  // and verify the gated tensor is exactly half its input
  Tensor x = patch_batch(2, 4, 12, 931);
  Tape t;
  auto ids = m.bind(t);
  m.features(t, ids, t.push(x), Mode::eval);
  // gates are sigmoid(0) = 0.5 exactly; verify via a reduced forward:
  Tape t2;
  int a = t2.push(patch_batch(2, 16, 5, 932));
  int sq = t2.reshape(t2.global_avg_pool(a), {2, 16, 1, 1});
  int g1 = t2.relu(t2.conv2d_grouped(sq, t2.push(b.se_w1), t2.push(b.se_b1), 4, 1, 0));
  int g2 = t2.sigmoid(t2.conv2d_grouped(g1, t2.push(b.se_w2), t2.push(b.se_b2), 4, 1, 0));
  int gated = t2.scale_channels(a, t2.reshape(g2, {2, 16}));
  for (size_t i = 0; i < t2.val(gated).data.size(); ++i)
    CHECK(t2.val(gated).data[i] == 0.5 * t2.val(a).data[i]);
}

TEST_CASE("SE gate matches a naive per-marker loop") {
  const int C = 3, k = 4, r = 2, n = 2, hw = 5;
  CimConfig cfg;
  cfg.markers = C;
  cfg.width = k;
  cfg.se_reduction = r;
  CimModel m = CimModel::build(cfg);
  const auto& b = m.blocks[0];
  Tensor a = randn({n, C * k, hw, hw}, 941);

  Tape t;
  int aid = t.push(a);
  int sq = t.reshape(t.global_avg_pool(aid), {n, C * k, 1, 1});
  int g1 = t.relu(t.conv2d_grouped(sq, t.push(b.se_w1), t.push(b.se_b1), C, 1, 0));
  int g2 = t.sigmoid(t.conv2d_grouped(g1, t.push(b.se_w2), t.push(b.se_b2), C, 1, 0));
  int gated = t.scale_channels(aid, t.reshape(g2, {n, C * k}));

  // naive: per sample, per marker, squeeze k channels, two tiny affine maps
  for (int ni = 0; ni < n; ++ni)
    for (int c = 0; c < C; ++c) {
      std::vector<double> squeeze(static_cast<size_t>(k), 0.0);
      for (int f = 0; f < k; ++f) {
        double s = 0.0;
        for (int y = 0; y < hw; ++y)
          for (int xo = 0; xo < hw; ++xo) s += a.at(ni, c * k + f, y, xo);
        squeeze[static_cast<size_t>(f)] = s / (hw * hw);
      }
      std::vector<double> hidden(static_cast<size_t>(k / r), 0.0);
      for (int o = 0; o < k / r; ++o) {
        double s = b.se_b1.at(c * (k / r) + o);
        for (int f = 0; f < k; ++f)
          s += b.se_w1.at(c * (k / r) + o, f, 0, 0) * squeeze[static_cast<size_t>(f)];
        hidden[static_cast<size_t>(o)] = s > 0.0 ? s : 0.0;
      }
      for (int f = 0; f < k; ++f) {
        double s = b.se_b2.at(c * k + f);
        for (int o = 0; o < k / r; ++o)
          s += b.se_w2.at(c * k + f, o, 0, 0) * hidden[static_cast<size_t>(o)];
        const double gate = 1.0 / (1.0 + std::exp(-s));
        for (int y = 0; y < hw; ++y)
          for (int xo = 0; xo < hw; ++xo) {
            const double want = a.at(ni, c * k + f, y, xo) * gate;
            CHECK(t.val(gated).at(ni, c * k + f, y, xo) ==
                  doctest::Approx(want).epsilon(1e-12));
          }
      }
    }
}

TEST_CASE("projection head with identity-shaped test weights is ReLU(pooled)") {
  CimConfig cfg = CimConfig::cim_s(4);
  cfg.proj_dim = cfg.feat_dim();
  CimModel m = CimModel::build(cfg);
  for (auto& v : m.proj_w1.data) v = 0.0;
  for (auto& v : m.proj_w2.data) v = 0.0;
  for (int i = 0; i < cfg.proj_dim; ++i) {
    m.proj_w1.at(i, i) = 1.0;
    m.proj_w2.at(i, i) = 1.0;
  }
  Tape t;
  auto ids = m.bind(t);
  int pooled = t.push(randn({3, cfg.feat_dim()}, 951));
  int proj = m.projection(t, ids, pooled);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < cfg.proj_dim; ++j) {
      const double p = t.val(pooled).at(i, j);
      CHECK(t.val(proj).at(i, j) == (p > 0.0 ? p : 0.0));
    }
}

TEST_CASE("zero pooled input with zero biases gives zero logits") {
  CimModel m = CimModel::build(CimConfig::cim_s(4));
  Tape t;
  auto ids = m.bind(t);
  int logits = m.classifier(t, ids, t.push(Tensor::zeros({2, m.feat_dim()})));
  CHECK(t.val(logits).abs_max() == 0.0);
}

TEST_CASE("gradient check through the classifier head") {
  CimModel m = CimModel::build(CimConfig::cim_s(3));
  double err = grad_check(
      [&m](Tape& t, int id) {
        auto ids = m.bind(t);
        return t.sum_all(t.sigmoid(m.classifier(t, ids, id)));
      },
      randn({2, m.feat_dim()}, 961));
  CHECK(err < 1e-6);
}

TEST_CASE("full CIM-S forward with NT-Xent passes the gradient check") {
  CimConfig cfg;
  cfg.markers = 3;
  cfg.width = 2;
  cfg.depth = 1;
  cfg.se_reduction = 2;
  cfg.input_hw = 8;
  cfg.proj_dim = 6;
  cfg.seed = 3;
  CimModel m = CimModel::build(cfg);

  Tensor batch = patch_batch(4, 3, 8, 971);  // two views of two samples
  std::vector<Tensor> points;
  for (auto& p : m.parameters()) points.push_back(*p.value);
  points.push_back(batch);

  double err = grad_check_many(
      [&](Tape& t, const std::vector<int>& ids) {
        // fresh stats every evaluation so train-mode updates cannot leak
        m.stem_bn = BnStats::make(m.cfg.feat_dim());
        m.blocks[0].bn1 = BnStats::make(m.cfg.feat_dim());
        m.blocks[0].bn2 = BnStats::make(m.cfg.feat_dim());
        std::vector<int> pids(ids.begin(), ids.end() - 1);
        int pooled = m.features(t, pids, ids.back(), Mode::train);
        int proj = m.projection(t, pids, pooled);
        int sims = t.scale(t.matmul_nt(t.l2_normalize_rows(proj), t.l2_normalize_rows(proj)),
                           1.0 / 0.2);
        return t.ntxent_from_sims(sims);
      },
      points);
  CHECK(err < 1e-4);
}

TEST_CASE("early-fusion baseline mixes channels and matches the parameter budget") {
  FusionConfig fc;
  fc.channels = 8;
  FusionModel f = FusionModel::build(fc);
  CimModel m = CimModel::build(CimConfig::cim_s(8));

  const double cim_ssl = static_cast<double>(m.counts().backbone + m.counts().projection);
  const double fus_ssl = static_cast<double>(f.counts().backbone + f.counts().projection);
  CHECK(fus_ssl <= 2.0 * cim_ssl);
  CHECK(fus_ssl >= 0.5 * cim_ssl);

  {
    Tape warm;
    auto ids = f.bind(warm);
    f.features(warm, ids, warm.push(patch_batch(8, 8, 24, 981)), Mode::train);
  }
  Tensor x = patch_batch(1, 8, 24, 982);
  Tensor xp = x;
  for (int y = 0; y < 24; ++y)
    for (int xo = 0; xo < 24; ++xo) xp.at(0, 3, y, xo) += 0.25;
  Tape t1, t2;
  auto i1 = f.bind(t1);
  auto i2 = f.bind(t2);
  const Tensor& a = t1.val(f.features(t1, i1, t1.push(x), Mode::eval));
  const Tensor& b = t2.val(f.features(t2, i2, t2.push(xp), Mode::eval));
  int changed = 0;
  for (int j = 0; j < f.feat_dim(); ++j)
    if (a.at(0, j) != b.at(0, j)) ++changed;
  CHECK(changed == f.feat_dim());
}

TEST_CASE("model save/load round-trips forward outputs bit-exactly") {
  CimModel m = CimModel::build(CimConfig::cim_s(8, 6, 33));
  {
    Tape warm;
    auto ids = m.bind(warm);
    m.features(warm, ids, warm.push(patch_batch(8, 8, 24, 991)), Mode::train);
  }
  const std::string path = tmp_path("roundtrip.cimw");
  m.save(path);
  CimModel n = CimModel::load(path);
  // float32 storage: bit-exactness holds after one save/load cycle
  const std::string path2 = tmp_path("roundtrip2.cimw");
  n.save(path2);
  CimModel n2 = CimModel::load(path2);
  Tensor x = patch_batch(2, 8, 24, 992);
  Tensor ea = n.embed(x), eb = n2.embed(x);
  REQUIRE(ea.same_shape(eb));
  for (size_t i = 0; i < ea.data.size(); ++i) CHECK(ea.data[i] == eb.data[i]);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}
