#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cimlite/augment.hpp"
#include "cimlite/data.hpp"
#include "cimlite/model.hpp"

namespace cimlite {

struct EvalReport {
  std::vector<std::vector<int64_t>> confusion;  // rows = truth, cols = prediction
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  std::vector<double> per_class_recall;
  double best_val_balanced_accuracy = 0.0;
  int best_epoch = -1;

  std::string to_json() const;
  void write_confusion_csv(const std::string& path) const;
};

EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                int num_classes);

// argmax with ties resolved toward the lowest index
std::vector<int> predict_classes(const Tensor& logits);

struct TrainConfig {
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
  uint64_t seed = 1;
  AugmentConfig aug;

  void validate() const;
};

// full fine-tuning of backbone plus classifier head with Adam and weighted
// cross-entropy; best epoch by validation balanced accuracy; reports test metrics
EvalReport train_supervised(Encoder& enc, const DatasetBundle& data, const TrainConfig& cfg);

// frozen encoder: eval-mode embeddings computed once, a single linear layer
// trained on top; the encoder is never modified
EvalReport linear_eval(Encoder& enc, const DatasetBundle& data, const TrainConfig& cfg);

// 1-D earth mover distance between two samples; equal sizes reduce to the
// mean absolute difference of the sorted values
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

}  // namespace cimlite
