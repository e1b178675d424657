#include "cimlite/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cimlite/errors.hpp"
#include "cimlite/losses.hpp"
#include "cimlite/optim.hpp"
#include "cimlite/rng.hpp"

namespace cimlite {

using nlohmann::json;

std::vector<int> predict_classes(const Tensor& logits) {
  require(logits.rank() == 2, "predict: logits must be [N,K]");
  std::vector<int> out(static_cast<size_t>(logits.dim(0)));
  for (int i = 0; i < logits.dim(0); ++i) {
    int best = 0;
    for (int k = 1; k < logits.dim(1); ++k)
      if (logits.at(i, k) > logits.at(i, best)) best = k;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                int num_classes) {
  require(!truth.empty(), "evaluate: empty prediction set");
  require(truth.size() == pred.size(), "evaluate: truth/prediction size mismatch");
  require(num_classes >= 1, "evaluate: need at least one class");
  EvalReport r;
  r.confusion.assign(static_cast<size_t>(num_classes),
                     std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && truth[i] < num_classes, "evaluate: truth label out of range");
    require(pred[i] >= 0 && pred[i] < num_classes, "evaluate: prediction out of range");
    ++r.confusion[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])];
  }
  int64_t correct = 0;
  r.per_class_recall.resize(static_cast<size_t>(num_classes));
  for (int k = 0; k < num_classes; ++k) {
    int64_t row = 0;
    for (int j = 0; j < num_classes; ++j) row += r.confusion[static_cast<size_t>(k)][static_cast<size_t>(j)];
    require(row > 0, "evaluate: class " + std::to_string(k) + " absent from truth");
    correct += r.confusion[static_cast<size_t>(k)][static_cast<size_t>(k)];
    r.per_class_recall[static_cast<size_t>(k)] =
        static_cast<double>(r.confusion[static_cast<size_t>(k)][static_cast<size_t>(k)]) /
        static_cast<double>(row);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  r.balanced_accuracy =
      std::accumulate(r.per_class_recall.begin(), r.per_class_recall.end(), 0.0) / num_classes;
  return r;
}

std::string EvalReport::to_json() const {
  json j;
  j["accuracy"] = accuracy;
  j["balanced_accuracy"] = balanced_accuracy;
  j["per_class_recall"] = per_class_recall;
  j["confusion"] = confusion;
  if (best_epoch >= 0) {
    j["best_epoch"] = best_epoch;
    j["best_val_balanced_accuracy"] = best_val_balanced_accuracy;
  }
  return j.dump(2);
}

void EvalReport::write_confusion_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "truth";
  for (size_t k = 0; k < confusion.size(); ++k) os << ",pred" << k;
  os << "\n";
  for (size_t i = 0; i < confusion.size(); ++i) {
    os << i;
    for (int64_t v : confusion[i]) os << "," << v;
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

void TrainConfig::validate() const {
  require(epochs >= 1, "train: epochs must be >= 1");
  require(batch >= 1, "train: batch must be >= 1");
  require(lr > 0.0, "train: lr must be positive");
  aug.validate();
}

namespace {

Tensor predict_logits(Encoder& enc, const DatasetBundle& data, const std::vector<int>& idx) {
  const int k_chunk = 128;
  Tensor out;
  int row = 0;
  for (size_t start = 0; start < idx.size(); start += k_chunk) {
    std::vector<int> part(idx.begin() + static_cast<ptrdiff_t>(start),
                          idx.begin() + static_cast<ptrdiff_t>(
                                            std::min(start + k_chunk, idx.size())));
    Tape t;
    const std::vector<int> ids = enc.bind(t);
    const int x = t.push(data.gather_patches(part));
    const int logits = enc.classifier(t, ids, enc.features(t, ids, x, Mode::eval));
    const Tensor& lv = t.val(logits);
    if (out.numel() == 0) out = Tensor({static_cast<int>(idx.size()), lv.dim(1)});
    for (int i = 0; i < lv.dim(0); ++i)
      for (int j = 0; j < lv.dim(1); ++j) out.at(row + i, j) = lv.at(i, j);
    row += lv.dim(0);
  }
  return out;
}

std::vector<Tensor> snapshot(const std::vector<Tensor*>& state) {
  std::vector<Tensor> copy;
  copy.reserve(state.size());
  for (const Tensor* t : state) copy.push_back(*t);
  return copy;
}

void restore(const std::vector<Tensor*>& state, const std::vector<Tensor>& copy) {
  for (size_t i = 0; i < state.size(); ++i) *state[i] = copy[i];
}

}  // namespace

EvalReport train_supervised(Encoder& enc, const DatasetBundle& data, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<int> tr = data.indices_of_split(kTrain);
  const std::vector<int> va = data.indices_of_split(kVal);
  const std::vector<int> te = data.indices_of_split(kTest);
  require(!tr.empty() && !va.empty() && !te.empty(), "train: dataset has empty splits");
  int num_classes = 0;
  for (int l : data.labels) num_classes = std::max(num_classes, l + 1);
  const Tensor weights = class_weights(data.gather_labels(tr), num_classes);

  const int c = data.patches.dim(1), h = data.patches.dim(2), w = data.patches.dim(3);
  const size_t chw = static_cast<size_t>(c) * h * w;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt(enc.parameters(), acfg);
  const std::vector<Tensor*> state = enc.state_tensors();

  std::vector<Tensor> best_state = snapshot(state);
  double best_ba = -1.0;
  int best_epoch = -1;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuf(derive_seed(cfg.seed, 2000 + static_cast<uint64_t>(epoch), 0));
    shuffle(tr.begin(), tr.end(), shuf);
    for (size_t start = 0; start < tr.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(start + static_cast<size_t>(cfg.batch), tr.size());
      const int m = static_cast<int>(stop - start);
      Tensor batch({m, c, h, w});
      std::vector<int> labels(static_cast<size_t>(m));
      for (int j = 0; j < m; ++j) {
        const int pi = tr[start + static_cast<size_t>(j)];
        Rng aug_rng(derive_seed(cfg.seed, 1000 + static_cast<uint64_t>(epoch),
                                static_cast<uint64_t>(pi)));
        const Tensor v = augment_patch(data.patch(pi), cfg.aug, aug_rng);
        std::copy(v.data.begin(), v.data.end(),
                  batch.data.begin() + static_cast<ptrdiff_t>(static_cast<size_t>(j) * chw));
        labels[static_cast<size_t>(j)] = data.labels[static_cast<size_t>(pi)];
      }
      Tape t;
      const std::vector<int> ids = enc.bind(t);
      const int x = t.push(batch);
      const int logits = enc.classifier(t, ids, enc.features(t, ids, x, Mode::train));
      const int loss = t.wce_node(logits, labels, weights);
      t.backward(loss);
      opt.step(t, ids);
    }
    const EvalReport vr = evaluate_predictions(
        data.gather_labels(va), predict_classes(predict_logits(enc, data, va)), num_classes);
    if (vr.balanced_accuracy > best_ba) {
      best_ba = vr.balanced_accuracy;
      best_epoch = epoch;
      best_state = snapshot(state);
    }
  }

  restore(state, best_state);
  EvalReport r = evaluate_predictions(
      data.gather_labels(te), predict_classes(predict_logits(enc, data, te)), num_classes);
  r.best_val_balanced_accuracy = best_ba;
  r.best_epoch = best_epoch;
  return r;
}

EvalReport linear_eval(Encoder& enc, const DatasetBundle& data, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<int> tr = data.indices_of_split(kTrain);
  const std::vector<int> va = data.indices_of_split(kVal);
  const std::vector<int> te = data.indices_of_split(kTest);
  require(!tr.empty() && !va.empty() && !te.empty(), "linear eval: dataset has empty splits");
  int num_classes = 0;
  for (int l : data.labels) num_classes = std::max(num_classes, l + 1);
  const Tensor weights = class_weights(data.gather_labels(tr), num_classes);

  const Tensor emb = enc.embed(data.patches);
  const int d = emb.dim(1);

  Tensor lw({num_classes, d});
  Tensor lb({num_classes});
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam opt({{"linear.w", &lw, false}, {"linear.b", &lb, true}}, acfg);

  auto logits_for = [&](const std::vector<int>& idx) {
    Tensor rows({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) rows.at(static_cast<int>(i), j) = emb.at(idx[i], j);
    Tape t;
    const int logits = t.linear(t.push(rows), t.push(lw), t.push(lb));
    return t.val(logits);
  };

  Tensor best_w = lw, best_b = lb;
  double best_ba = -1.0;
  int best_epoch = -1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuf(derive_seed(cfg.seed, 3000 + static_cast<uint64_t>(epoch), 0));
    shuffle(tr.begin(), tr.end(), shuf);
    for (size_t start = 0; start < tr.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(start + static_cast<size_t>(cfg.batch), tr.size());
      const int m = static_cast<int>(stop - start);
      Tensor rows({m, d});
      std::vector<int> labels(static_cast<size_t>(m));
      for (int j = 0; j < m; ++j) {
        const int pi = tr[start + static_cast<size_t>(j)];
        for (int q = 0; q < d; ++q) rows.at(j, q) = emb.at(pi, q);
        labels[static_cast<size_t>(j)] = data.labels[static_cast<size_t>(pi)];
      }
      Tape t;
      const int wi = t.push(lw);
      const int bi = t.push(lb);
      const int loss = t.wce_node(t.linear(t.push(rows), wi, bi), labels, weights);
      t.backward(loss);
      opt.step(t, {wi, bi});
    }
    const EvalReport vr = evaluate_predictions(data.gather_labels(va),
                                               predict_classes(logits_for(va)), num_classes);
    if (vr.balanced_accuracy > best_ba) {
      best_ba = vr.balanced_accuracy;
      best_epoch = epoch;
      best_w = lw;
      best_b = lb;
    }
  }

  lw = best_w;
  lb = best_b;
  EvalReport r = evaluate_predictions(data.gather_labels(te), predict_classes(logits_for(te)),
                                      num_classes);
  r.best_val_balanced_accuracy = best_ba;
  r.best_epoch = best_epoch;
  return r;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  require(!a.empty() && !b.empty(), "wasserstein: empty sample");
  for (double v : a) require(std::isfinite(v), "wasserstein: non-finite value");
  for (double v : b) require(std::isfinite(v), "wasserstein: non-finite value");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  size_t i = 0, j = 0;
  double dist = 0.0, last = std::min(a[0], b[0]);
  while (i < a.size() || j < b.size()) {
    double x;
    if (i < a.size() && (j == b.size() || a[i] <= b[j]))
      x = a[i];
    else
      x = b[j];
    dist += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (x - last);
    last = x;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return dist;
}

}  // namespace cimlite
