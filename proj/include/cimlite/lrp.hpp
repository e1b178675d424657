#pragma once

#include <string>
#include <vector>

#include "cimlite/data.hpp"
#include "cimlite/model.hpp"
#include "cimlite/tensor.hpp"

namespace cimlite {

// Composite relevance propagation through the channel-independent encoder:
// batchnorm folded into the preceding convolutions, gamma rule on hidden
// convolutions, box rule at the input layer, epsilon rule on dense layers,
// uniform redistribution through pooling, SE gates treated as fixed
// coefficients, residual joins split proportionally to contribution.
struct LrpConfig {
  enum class Target { embedding_sum, embedding_unit, logit };
  enum class Rules { composite, epsilon_only };

  Target target = Target::embedding_sum;
  int target_index = 0;  // embedding unit or logit index
  Rules rules = Rules::composite;
  double epsilon = 1e-6;
  double gamma = 0.25;
  double box_lo = 0.0;
  double box_hi = 1.0;
  double tau_noise = 0.01;  // |R| below tau * max|R| is discarded
  double percentile = 99.0;

  void validate() const;
};

struct RelevanceMap {
  Tensor values;           // [C,H,W], conserving signed relevance
  double explained = 0.0;  // the scalar that was decomposed
};

std::vector<RelevanceMap> lrp_explain_batch(CimModel& model, const Tensor& patches,
                                            const LrpConfig& cfg);
RelevanceMap lrp_explain(CimModel& model, const Tensor& patch, const LrpConfig& cfg);

// noise floor -> positive part -> clip at patch percentile -> rescale to [0,1],
// then weight by mean channel intensity
Tensor aggregate_channel_relevance(const Tensor& relevance, const Tensor& patch,
                                   double tau_noise = 0.01, double pct = 99.0);

// mean of the top-3 member scores (all members when fewer)
double module_score(const Tensor& channel_scores, const MarkerModule& module);

struct PhenotypeAssignment {
  int patch_id = -1;
  std::vector<double> module_scores;
  int chosen = -1;
  double margin = 0.0;  // best minus runner-up; the score itself when single module
  bool tie = false;     // exact tie resolved by declaration order
};

PhenotypeAssignment assign_phenotype(const Tensor& channel_scores,
                                     const std::vector<MarkerModule>& modules);

struct PhenotypingResult {
  std::vector<PhenotypeAssignment> assignments;
  std::vector<Tensor> channel_scores;  // per patch, [C]
};

// label-free phenotyping over a patch stack: explain, aggregate, assign
PhenotypingResult phenotype_patches(CimModel& model, const Tensor& patches,
                                    const std::vector<MarkerModule>& modules,
                                    const LrpConfig& cfg);

// both distances are computed on samples min-max rescaled over the pooled
// pair, so they are comparable across the two representations
struct GroupSeparability {
  int count = 0;
  double intensity_wd = 0.0;  // W1 between the two markers' mean-intensity samples
  double relevance_wd = 0.0;  // W1 between the two markers' relevance-score samples
};

GroupSeparability group_separability(const Tensor& patches, const std::vector<int>& members,
                                     const std::vector<Tensor>& channel_scores, int marker_a,
                                     int marker_b);

// "RLVM" stack of float32 relevance maps with patch ids
void save_relevance_maps(const std::string& path, const std::vector<RelevanceMap>& maps,
                         const std::vector<int>& patch_ids);

struct RelevanceMapsFile {
  Tensor maps;  // [N,C,H,W]
  std::vector<int> patch_ids;
};

RelevanceMapsFile load_relevance_maps(const std::string& path);

}  // namespace cimlite
