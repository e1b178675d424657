#include "cimlite/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cimlite/errors.hpp"
#include "cimlite/rng.hpp"
#include "cimlite/wire.hpp"

namespace cimlite {

using nlohmann::json;

void SynthConfig::validate() const {
  require(markers >= 1, "synth: markers must be >= 1");
  require(patch >= 4, "synth: patch size must be >= 4");
  require(count >= 1, "synth: count must be >= 1");
  require(background_noise >= 0.0, "synth: background noise must be >= 0");
  require(!phenotypes.empty(), "synth: at least one phenotype required");
  double total = 0.0;
  for (const auto& p : phenotypes) {
    require(p.frequency > 0.0, "synth: phenotype frequency must be > 0");
    require(p.mean_intensity > 0.0, "synth: mean intensity must be > 0");
    require(p.blob_radius > 0.0, "synth: blob radius must be > 0");
    require(!p.markers.empty(), "synth: phenotype needs at least one marker");
    for (int m : p.markers)
      require(m >= 0 && m < markers, "synth: phenotype marker index out of range");
    total += p.frequency;
  }
  require(std::abs(total - 1.0) < 1e-9, "synth: phenotype frequencies must sum to 1");
  if (bleed.channel >= 0) {
    require(bleed.channel < markers, "synth: bleed channel out of range");
    require(bleed.amplitude >= 0.0, "synth: bleed amplitude must be >= 0");
  }
}

SynthConfig SynthConfig::preset(int markers) {
  SynthConfig cfg;
  cfg.markers = markers;
  auto ph = [](std::string name, std::vector<int> m, double f, double a) {
    PhenotypeSpec p;
    p.name = std::move(name);
    p.markers = std::move(m);
    p.frequency = f;
    p.mean_intensity = a;
    p.blob_radius = 6.0;
    return p;
  };
  if (markers == 8) {
    cfg.phenotypes = {
        ph("ph0", {0, 1}, 0.30, 0.90), ph("ph1", {2, 3}, 0.30, 0.80),
        ph("ph2", {4, 5}, 0.20, 0.85), ph("ph3", {0, 6}, 0.16, 0.80),
        ph("ph4", {6, 7}, 0.02, 0.90), ph("ph5", {3, 7}, 0.02, 0.85),
    };
  } else if (markers == 18) {
    cfg.phenotypes = {
        ph("ph0", {0, 1, 2}, 0.30, 0.90),    ph("ph1", {3, 4, 5}, 0.30, 0.80),
        ph("ph2", {6, 7, 8}, 0.20, 0.85),    ph("ph3", {9, 10, 11}, 0.16, 0.80),
        ph("ph4", {12, 13, 14}, 0.02, 0.90), ph("ph5", {15, 16, 17}, 0.02, 0.85),
    };
  } else if (markers == 49) {
    auto span = [](int lo, int hi) {
      std::vector<int> v;
      for (int i = lo; i < hi; ++i) v.push_back(i);
      return v;
    };
    cfg.phenotypes = {
        ph("ph0", span(0, 8), 0.30, 0.90),   ph("ph1", span(8, 16), 0.30, 0.80),
        ph("ph2", span(16, 24), 0.20, 0.85), ph("ph3", span(24, 32), 0.16, 0.80),
        ph("ph4", span(32, 40), 0.02, 0.90), ph("ph5", span(40, 49), 0.02, 0.85),
    };
  } else {
    throw std::invalid_argument("synth preset: markers must be one of 8, 18, 49");
  }
  return cfg;
}

std::vector<int> DatasetBundle::indices_of_split(uint8_t code) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(split.size()); ++i)
    if (split[i] == code) out.push_back(i);
  return out;
}

Tensor DatasetBundle::gather_patches(const std::vector<int>& idx) const {
  const int c = patches.dim(1), h = patches.dim(2), w = patches.dim(3);
  const size_t stride = static_cast<size_t>(c) * h * w;
  Tensor out({static_cast<int>(idx.size()), c, h, w});
  for (size_t j = 0; j < idx.size(); ++j) {
    require(idx[j] >= 0 && idx[j] < size(), "gather: patch index out of range");
    std::copy_n(patches.data.begin() + static_cast<ptrdiff_t>(stride * idx[j]), stride,
                out.data.begin() + static_cast<ptrdiff_t>(stride * j));
  }
  return out;
}

std::vector<int> DatasetBundle::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) {
    require(i >= 0 && i < static_cast<int>(labels.size()), "gather: label index out of range");
    out.push_back(labels[i]);
  }
  return out;
}

Tensor DatasetBundle::patch(int i) const {
  require(i >= 0 && i < size(), "patch index out of range");
  const int c = patches.dim(1), h = patches.dim(2), w = patches.dim(3);
  const size_t stride = static_cast<size_t>(c) * h * w;
  Tensor out({c, h, w});
  std::copy_n(patches.data.begin() + static_cast<ptrdiff_t>(stride * i), stride,
              out.data.begin());
  return out;
}

DatasetBundle generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.count, c = cfg.markers, p = cfg.patch;
  DatasetBundle b;
  b.patches = Tensor({n, c, p, p});
  b.labels.resize(static_cast<size_t>(n));
  b.split.assign(static_cast<size_t>(n), kUnsplit);
  for (int m = 0; m < c; ++m) b.panel.push_back("m" + std::to_string(m));
  for (const auto& ph : cfg.phenotypes) {
    b.phenotype_names.push_back(ph.name);
    b.modules.push_back({ph.name, ph.markers});
  }

  const double center = (p - 1) / 2.0;
  for (int i = 0; i < n; ++i) {
    Rng lab(derive_seed(cfg.seed, static_cast<uint64_t>(i), 0));
    const double u = lab.uniform();
    int label = static_cast<int>(cfg.phenotypes.size()) - 1;
    double acc = 0.0;
    for (size_t k = 0; k < cfg.phenotypes.size(); ++k) {
      acc += cfg.phenotypes[k].frequency;
      if (u < acc) {
        label = static_cast<int>(k);
        break;
      }
    }
    b.labels[static_cast<size_t>(i)] = label;
    const PhenotypeSpec& ph = cfg.phenotypes[static_cast<size_t>(label)];

    for (int ch = 0; ch < c; ++ch) {
      Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(i), 100 + static_cast<uint64_t>(ch)));
      const bool active = std::find(ph.markers.begin(), ph.markers.end(), ch) != ph.markers.end();
      double amp = 0.0, sigma = 1.0;
      if (active) {
        const double radius = ph.blob_radius * (1.0 + 0.2 * (2.0 * rng.uniform() - 1.0));
        sigma = radius / 2.0;
        amp = std::max(0.0, rng.normal(ph.mean_intensity, 0.1 * ph.mean_intensity));
      }
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          double v = cfg.background_noise * rng.uniform();
          if (active) {
            const double dy = y - center, dx = x - center;
            v += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
          b.patches.at(i, ch, y, x) = v;
        }
      }
    }

    if (cfg.bleed.channel >= 0 && cfg.bleed.amplitude > 0.0) {
      Rng bl(derive_seed(cfg.seed, static_cast<uint64_t>(i), 9000));
      const double phx = bl.uniform() * 2.0 * M_PI;
      const double phy = bl.uniform() * 2.0 * M_PI;
      // background fluorescence strength varies from cell to cell, so the
      // contaminated channel shows a continuum from faint haze to bright glow
      const double strength = cfg.bleed.amplitude * (0.2 + 0.8 * bl.uniform());
      const int ch = cfg.bleed.channel;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          b.patches.at(i, ch, y, x) +=
              strength * (0.5 + 0.25 * std::cos(2.0 * M_PI * x / p + phx) +
                          0.25 * std::cos(2.0 * M_PI * y / p + phy));
    }
  }

  normalize_percentile_inplace(b.patches, 99.9);
  // quantize so in-memory data matches what persistence will reproduce
  for (double& v : b.patches.data) v = static_cast<double>(static_cast<float>(v));
  return b;
}

double percentile(std::vector<double> values, double p) {
  require(!values.empty(), "percentile of empty range");
  require(p >= 0.0 && p <= 100.0, "percentile must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

void normalize_percentile_inplace(Tensor& patches, double p) {
  require(patches.rank() == 4, "normalize expects [N,C,H,W]");
  for (double v : patches.data)
    require(v >= 0.0, "normalize expects non-negative intensities");
  const int n = patches.dim(0), c = patches.dim(1);
  const size_t hw = static_cast<size_t>(patches.dim(2)) * patches.dim(3);
  std::vector<double> channel(static_cast<size_t>(n) * hw);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const size_t src = (static_cast<size_t>(i) * c + ch) * hw;
      std::copy_n(patches.data.begin() + static_cast<ptrdiff_t>(src), hw,
                  channel.begin() + static_cast<ptrdiff_t>(static_cast<size_t>(i) * hw));
    }
    const double denom = percentile(channel, p);
    for (int i = 0; i < n; ++i) {
      const size_t src = (static_cast<size_t>(i) * c + ch) * hw;
      for (size_t k = 0; k < hw; ++k) {
        double& v = patches.data[src + k];
        v = denom > 0.0 ? v / denom : 0.0;
      }
    }
  }
}

void split_dataset(DatasetBundle& b, double train_frac, double val_frac, uint64_t seed) {
  require(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0,
          "split fractions must be positive and leave room for test");
  require(b.size() == static_cast<int>(b.labels.size()), "split: labels/patches size mismatch");
  int num_classes = 0;
  for (int l : b.labels) {
    require(l >= 0, "split: negative label");
    num_classes = std::max(num_classes, l + 1);
  }
  b.split.assign(b.labels.size(), kUnsplit);
  for (int k = 0; k < num_classes; ++k) {
    std::vector<int> idx;
    for (int i = 0; i < b.size(); ++i)
      if (b.labels[static_cast<size_t>(i)] == k) idx.push_back(i);
    require(static_cast<int>(idx.size()) >= 3,
            "split: class " + std::to_string(k) + " has fewer than 3 samples");
    Rng rng(derive_seed(seed, 0x5143, static_cast<uint64_t>(k)));
    shuffle(idx.begin(), idx.end(), rng);
    const int n = static_cast<int>(idx.size());
    int n_tr = static_cast<int>(std::lround(n * train_frac));
    int n_va = static_cast<int>(std::lround(n * val_frac));
    int n_te = n - n_tr - n_va;
    while (n_te < 1) {
      (n_tr >= n_va ? n_tr : n_va) -= 1;
      ++n_te;
    }
    while (n_va < 1) {
      (n_tr >= n_te ? n_tr : n_te) -= 1;
      ++n_va;
    }
    while (n_tr < 1) {
      (n_va >= n_te ? n_va : n_te) -= 1;
      ++n_tr;
    }
    for (int j = 0; j < n; ++j) {
      uint8_t code = kTest;
      if (j < n_tr)
        code = kTrain;
      else if (j < n_tr + n_va)
        code = kVal;
      b.split[static_cast<size_t>(idx[static_cast<size_t>(j)])] = code;
    }
  }
}

void save_bundle(const DatasetBundle& b, const std::string& path) {
  require(b.patches.rank() == 4, "save_bundle expects [N,C,H,W] patches");
  require(b.size() == static_cast<int>(b.labels.size()) &&
              b.size() == static_cast<int>(b.split.size()),
          "save_bundle: inconsistent field sizes");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("MPXD", 4);
  wire::put_u32(os, 1);
  for (int d = 0; d < 4; ++d) wire::put_u32(os, static_cast<uint32_t>(b.patches.dim(d)));
  for (double v : b.patches.data) wire::put_f32(os, static_cast<float>(v));
  for (int l : b.labels) wire::put_i32(os, l);
  for (uint8_t s : b.split) os.put(static_cast<char>(s));
  if (!os) throw IoError("write failed: " + path);
  os.close();

  json side;
  side["panel"] = b.panel;
  side["phenotypes"] = b.phenotype_names;
  side["modules"] = json::array();
  for (const auto& m : b.modules) side["modules"].push_back({{"name", m.name}, {"members", m.members}});
  std::ofstream js(path + ".json");
  if (!js) throw IoError("cannot open for writing: " + path + ".json");
  js << side.dump(2) << "\n";
  if (!js) throw IoError("write failed: " + path + ".json");
}

DatasetBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MPXD", 4) != 0)
    throw IoError("bad magic in dataset: " + path);
  const uint32_t version = wire::get_u32(is, "version");
  if (version != 1) throw IoError("unsupported dataset version in " + path);
  int dims[4];
  for (int& d : dims) {
    d = static_cast<int>(wire::get_u32(is, "extent"));
    if (d <= 0) throw IoError("invalid extent in " + path);
  }
  DatasetBundle b;
  b.patches = Tensor({dims[0], dims[1], dims[2], dims[3]});
  for (double& v : b.patches.data) v = static_cast<double>(wire::get_f32(is, "patch payload"));
  b.labels.resize(static_cast<size_t>(dims[0]));
  for (int& l : b.labels) l = wire::get_i32(is, "labels");
  b.split.resize(static_cast<size_t>(dims[0]));
  for (uint8_t& s : b.split) {
    int ch = is.get();
    if (ch < 0) throw IoError("file truncated while reading splits in " + path);
    s = static_cast<uint8_t>(ch);
  }

  std::ifstream js(path + ".json");
  if (!js) throw IoError("missing dataset sidecar: " + path + ".json");
  json side;
  try {
    js >> side;
    b.panel = side.at("panel").get<std::vector<std::string>>();
    b.phenotype_names = side.at("phenotypes").get<std::vector<std::string>>();
    for (const auto& m : side.at("modules")) {
      MarkerModule mm;
      mm.name = m.at("name").get<std::string>();
      mm.members = m.at("members").get<std::vector<int>>();
      b.modules.push_back(std::move(mm));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed dataset sidecar " + path + ".json: " + e.what());
  }
  if (static_cast<int>(b.panel.size()) != dims[1])
    throw IoError("sidecar panel size disagrees with dataset channels: " + path);
  return b;
}

void export_embeddings(Encoder& enc, const DatasetBundle& b, const std::string& csv_path) {
  const Tensor emb = enc.embed(b.patches);
  std::ofstream os(csv_path);
  if (!os) throw IoError("cannot open for writing: " + csv_path);
  os << "patch_id,label";
  for (int j = 0; j < emb.dim(1); ++j) os << ",e" << j;
  os << "\n";
  os << std::setprecision(10);
  for (int i = 0; i < emb.dim(0); ++i) {
    os << i << "," << b.labels[static_cast<size_t>(i)];
    for (int j = 0; j < emb.dim(1); ++j) os << "," << emb.at(i, j);
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + csv_path);
}

}  // namespace cimlite
