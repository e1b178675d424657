#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cimlite/model.hpp"
#include "cimlite/tensor.hpp"

namespace cimlite {

struct MarkerModule {
  std::string name;
  std::vector<int> members;
};

struct PhenotypeSpec {
  std::string name;
  std::vector<int> markers;       // module markers lit up by this phenotype
  double frequency = 0.0;
  double mean_intensity = 0.8;
  double blob_radius = 6.0;
};

struct BleedSpec {
  int channel = -1;  // disabled when negative
  double amplitude = 0.0;
};

struct SynthConfig {
  int markers = 8;
  int patch = 24;
  int count = 6000;
  double background_noise = 0.08;
  std::vector<PhenotypeSpec> phenotypes;
  BleedSpec bleed;
  uint64_t seed = 1;

  void validate() const;
  // 6 phenotypes, two of them rare (2%); C in {8, 18, 49}
  static SynthConfig preset(int markers = 8);
};

// split codes
inline constexpr uint8_t kTrain = 0, kVal = 1, kTest = 2, kUnsplit = 255;

struct DatasetBundle {
  Tensor patches;  // [N, C, H, W], values in [0, ~1]
  std::vector<int> labels;
  std::vector<uint8_t> split;
  std::vector<std::string> panel;
  std::vector<std::string> phenotype_names;
  std::vector<MarkerModule> modules;

  int size() const { return patches.rank() == 4 ? patches.dim(0) : 0; }
  int channels() const { return patches.dim(1); }
  std::vector<int> indices_of_split(uint8_t code) const;
  Tensor gather_patches(const std::vector<int>& idx) const;
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
  Tensor patch(int i) const;  // [C,H,W]
};

DatasetBundle generate_synthetic(const SynthConfig& cfg);

// linear interpolation between closest ranks (rank = p/100 * (n-1))
double percentile(std::vector<double> values, double p);

// divide each channel by its dataset-wide p-th percentile; all-zero channels stay zero
void normalize_percentile_inplace(Tensor& patches, double p = 99.9);

void split_dataset(DatasetBundle& b, double train_frac = 0.7, double val_frac = 0.2,
                   uint64_t seed = 0);

// "MPXD" binary plus a JSON sidecar at path + ".json"
void save_bundle(const DatasetBundle& b, const std::string& path);
DatasetBundle load_bundle(const std::string& path);

void export_embeddings(Encoder& enc, const DatasetBundle& b, const std::string& csv_path);

}  // namespace cimlite
