#include "cimlite/ssl.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "cimlite/errors.hpp"

namespace cimlite {

void SslConfig::validate() const {
  require(objective == "simclr" || objective == "vicreg",
          "ssl: objective must be simclr or vicreg");
  require(temperature > 0.0, "ssl: temperature must be positive");
  require(iterations >= 0, "ssl: iterations must be >= 0");
  require(batch >= 2, "ssl: batch must be >= 2");
  require(checkpoint_every >= 0, "ssl: checkpoint interval must be >= 0");
  lars.validate();
  aug.validate();
}

SslResult pretrain(Encoder& enc, const DatasetBundle& data, const SslConfig& cfg) {
  cfg.validate();
  const std::vector<int> train = data.indices_of_split(kTrain);
  require(static_cast<int>(train.size()) >= cfg.batch,
          "ssl: train split smaller than batch size");
  require(data.channels() == enc.channels(), "ssl: dataset channels do not match encoder");

  const int b = cfg.batch;
  const int c = data.patches.dim(1), h = data.patches.dim(2), w = data.patches.dim(3);
  const size_t chw = static_cast<size_t>(c) * h * w;

  Lars opt(enc.parameters(), cfg.lars);
  Rng sampler(derive_seed(cfg.seed, 0xBA7C4, 0));
  SslResult res;
  res.loss_history.reserve(static_cast<size_t>(cfg.iterations));

  std::vector<int> pool = train;
  Tensor batch({2 * b, c, h, w});

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    shuffle(pool.begin(), pool.end(), sampler);
    for (int j = 0; j < b; ++j) {
      const int pi = pool[static_cast<size_t>(j)];
      const Tensor src = data.patch(pi);
      for (int view = 0; view < 2; ++view) {
        Rng aug_rng(derive_seed(cfg.seed, static_cast<uint64_t>(iter) * 2 + view,
                                static_cast<uint64_t>(pi)));
        const Tensor v = augment_patch(src, cfg.aug, aug_rng);
        std::copy(v.data.begin(), v.data.end(),
                  batch.data.begin() + static_cast<ptrdiff_t>((static_cast<size_t>(view) * b + j) * chw));
      }
    }

    Tape t;
    const std::vector<int> ids = enc.bind(t);
    const int x = t.push(batch);
    const int pooled = enc.features(t, ids, x, Mode::train);
    const int z = enc.projection(t, ids, pooled);
    int loss;
    if (cfg.objective == "simclr") {
      const int zn = t.l2_normalize_rows(z);
      loss = t.ntxent_from_sims(t.scale(t.matmul_nt(zn, zn), 1.0 / cfg.temperature));
    } else {
      loss = t.vicreg_node(t.slice_rows(z, 0, b), t.slice_rows(z, b, 2 * b), cfg.vic_lambda,
                           cfg.vic_mu, cfg.vic_nu);
    }
    const double lv = t.val(loss).at(0);
    if (!std::isfinite(lv))
      throw NumericError("ssl: loss diverged at iteration " + std::to_string(iter));
    t.backward(loss);
    opt.step(t, ids, cosine_decay(iter, cfg.iterations));
    res.loss_history.push_back(lv);

    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
      enc.save(cfg.checkpoint_prefix + "_iter" + std::to_string(iter + 1) + ".cimw");
  }
  return res;
}

void write_loss_csv(const std::vector<double>& history, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "iteration,loss\n" << std::setprecision(10);
  for (size_t i = 0; i < history.size(); ++i) os << i << "," << history[i] << "\n";
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace cimlite
