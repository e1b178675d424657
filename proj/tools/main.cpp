#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cimlite/data.hpp"
#include "cimlite/errors.hpp"
#include "cimlite/eval.hpp"
#include "cimlite/lrp.hpp"
#include "cimlite/malloc_tune.hpp"
#include "cimlite/model.hpp"
#include "cimlite/ssl.hpp"
#include "cimlite/tape.hpp"
#include "cimlite/tensor.hpp"

namespace {

using json = nlohmann::json;
using namespace cimlite;

constexpr const char* kVersion = "cimlite 0.1.0";

int thread_cap() {
  const char* env = std::getenv("CIMLITE_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || v < 1)
    throw std::invalid_argument("CIMLITE_THREADS must be a positive integer");
  return static_cast<int>(std::min(v, 256L));
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw std::invalid_argument("config root must be a JSON object");
  return j;
}

// flags win over config file entries, which win over built-in defaults
template <class T>
void merge(const CLI::Option* opt, const json& j, const char* key, T& value) {
  if (opt != nullptr && opt->count() > 0) return;
  if (!j.contains(key)) return;
  try {
    value = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config key has the wrong type: ") + key);
  }
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory: " + out);
}

// every command leaves exactly one of these next to its artifacts
struct Manifest {
  std::string command;
  uint64_t seed = 0;
  int threads = thread_cap();
  json config = json::object();
  std::vector<std::string> artifacts;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(const std::string& out_dir) {
    json m;
    m["command"] = command;
    m["version"] = kVersion;
    m["seed"] = seed;
    m["threads"] = threads;
    m["config"] = config;
    m["artifacts"] = artifacts;
    m["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string path = out_dir + "/manifest_" + command + ".json";
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << m.dump(2) << "\n";
  }
};

int dataset_classes(const DatasetBundle& ds) {
  int classes = static_cast<int>(ds.phenotype_names.size());
  for (int l : ds.labels) classes = std::max(classes, l + 1);
  return std::max(classes, 2);
}

std::unique_ptr<Encoder> build_encoder(const std::string& arch, const DatasetBundle& ds,
                                       uint64_t seed, int fusion_width) {
  const int hw = ds.patches.dim(2);
  if (arch == "cim") {
    CimConfig cfg = CimConfig::cim_s(ds.channels(), dataset_classes(ds), seed);
    cfg.input_hw = hw;
    return std::make_unique<CimModel>(CimModel::build(cfg));
  }
  if (arch == "fusion") {
    FusionConfig fc;
    fc.channels = ds.channels();
    fc.width = fusion_width;
    fc.input_hw = hw;
    fc.classes = dataset_classes(ds);
    fc.seed = seed;
    return std::make_unique<FusionModel>(FusionModel::build(fc));
  }
  throw std::invalid_argument("unknown architecture: " + arch);
}

std::unique_ptr<Encoder> load_encoder(const std::string& arch, const std::string& path) {
  if (arch == "cim") return std::make_unique<CimModel>(CimModel::load(path));
  if (arch == "fusion") return std::make_unique<FusionModel>(FusionModel::load(path));
  throw std::invalid_argument("unknown architecture: " + arch);
}

std::vector<int> select_split(const DatasetBundle& ds, const std::string& name) {
  if (name == "all") {
    std::vector<int> idx(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }
  uint8_t code = kTrain;
  if (name == "val")
    code = kVal;
  else if (name == "test")
    code = kTest;
  else if (name != "train")
    throw std::invalid_argument("split must be one of train|val|test|all");
  std::vector<int> idx = ds.indices_of_split(code);
  if (idx.empty()) throw std::invalid_argument("dataset has no patches in split " + name);
  return idx;
}

LrpConfig lrp_from_json(const json& j) {
  LrpConfig lc;
  std::string target = "embedding_sum", rules = "composite";
  merge(nullptr, j, "target", target);
  merge(nullptr, j, "rules", rules);
  merge(nullptr, j, "target_index", lc.target_index);
  merge(nullptr, j, "epsilon", lc.epsilon);
  merge(nullptr, j, "gamma", lc.gamma);
  merge(nullptr, j, "box_lo", lc.box_lo);
  merge(nullptr, j, "box_hi", lc.box_hi);
  merge(nullptr, j, "tau_noise", lc.tau_noise);
  merge(nullptr, j, "percentile", lc.percentile);
  if (target == "embedding_sum")
    lc.target = LrpConfig::Target::embedding_sum;
  else if (target == "embedding_unit")
    lc.target = LrpConfig::Target::embedding_unit;
  else if (target == "logit")
    lc.target = LrpConfig::Target::logit;
  else
    throw std::invalid_argument("target must be embedding_sum|embedding_unit|logit");
  if (rules == "composite")
    lc.rules = LrpConfig::Rules::composite;
  else if (rules == "epsilon_only")
    lc.rules = LrpConfig::Rules::epsilon_only;
  else
    throw std::invalid_argument("rules must be composite|epsilon_only");
  return lc;
}

json lrp_to_json(const LrpConfig& lc) {
  json j;
  j["target"] = lc.target == LrpConfig::Target::embedding_sum    ? "embedding_sum"
                : lc.target == LrpConfig::Target::embedding_unit ? "embedding_unit"
                                                                 : "logit";
  j["target_index"] = lc.target_index;
  j["rules"] = lc.rules == LrpConfig::Rules::composite ? "composite" : "epsilon_only";
  j["epsilon"] = lc.epsilon;
  j["gamma"] = lc.gamma;
  j["box_lo"] = lc.box_lo;
  j["box_hi"] = lc.box_hi;
  j["tau_noise"] = lc.tau_noise;
  j["percentile"] = lc.percentile;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write: " + path);
  os << text;
  if (!text.empty() && text.back() != '\n') os << "\n";
}

json read_report(const std::string& path) {
  json r = load_config(path);
  for (const char* key : {"accuracy", "balanced_accuracy", "per_class_recall"})
    if (!r.contains(key))
      throw std::invalid_argument("report " + path + " is missing key " + key);
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  cimlite::tune_malloc();
  CLI::App app{"channel-independent encoder pipeline for multiplex image patches"};
  app.require_subcommand(1);

  // ---- gen-data -----------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset with splits");
  std::string gen_out = ".", gen_cfg_path;
  int gen_markers = 8, gen_count = 0;
  uint64_t gen_seed = 1;
  gen->add_option("--out-dir", gen_out, "output directory");
  gen->add_option("--config", gen_cfg_path, "JSON config file");
  auto* gen_o_markers = gen->add_option("--markers", gen_markers, "panel size")
                            ->check(CLI::IsMember({8, 18, 49}));
  auto* gen_o_count = gen->add_option("--count", gen_count, "number of patches (0 = preset)");
  auto* gen_o_seed = gen->add_option("--seed", gen_seed, "generator seed");
  gen->callback([&] {
    const json j = load_config(gen_cfg_path);
    merge(gen_o_markers, j, "markers", gen_markers);
    merge(gen_o_count, j, "count", gen_count);
    merge(gen_o_seed, j, "seed", gen_seed);
    double train_frac = 0.7, val_frac = 0.2, noise = -1.0;
    merge(nullptr, j, "train_fraction", train_frac);
    merge(nullptr, j, "val_fraction", val_frac);
    merge(nullptr, j, "background_noise", noise);

    ensure_out_dir(gen_out);
    Manifest man;
    man.command = "gen-data";
    man.seed = gen_seed;

    SynthConfig sc = SynthConfig::preset(gen_markers);
    if (gen_count > 0) sc.count = gen_count;
    if (noise >= 0.0) sc.background_noise = noise;
    sc.seed = gen_seed;
    DatasetBundle ds = generate_synthetic(sc);
    split_dataset(ds, train_frac, val_frac, gen_seed);
    const std::string path = gen_out + "/dataset.mpxd";
    save_bundle(ds, path);

    man.config = {{"markers", sc.markers},          {"count", sc.count},
                  {"seed", sc.seed},                {"background_noise", sc.background_noise},
                  {"train_fraction", train_frac},   {"val_fraction", val_frac}};
    man.artifacts = {path, path + ".json"};
    man.write(gen_out);
    std::cout << "wrote " << path << ": " << ds.size() << " patches, " << ds.channels()
              << " markers, " << ds.phenotype_names.size() << " phenotypes\n";
  });

  // ---- pretrain -----------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  std::string pre_out = ".", pre_cfg_path, pre_dataset, pre_objective = "simclr";
  std::string pre_aug = "default", pre_arch = "cim";
  int pre_iters = 500, pre_batch = 64;
  uint64_t pre_seed = 1;
  pre->add_option("--out-dir", pre_out, "output directory");
  pre->add_option("--config", pre_cfg_path, "JSON config file");
  auto* pre_o_ds = pre->add_option("--dataset", pre_dataset, "MPXD dataset path");
  auto* pre_o_obj = pre->add_option("--objective", pre_objective, "SSL objective")
                        ->check(CLI::IsMember({"simclr", "vicreg"}));
  auto* pre_o_aug = pre->add_option("--aug-strength", pre_aug, "augmentation preset")
                        ->check(CLI::IsMember({"weak", "default", "strong"}));
  auto* pre_o_arch =
      pre->add_option("--arch", pre_arch, "encoder architecture")->check(CLI::IsMember({"cim", "fusion"}));
  auto* pre_o_it = pre->add_option("--iterations", pre_iters, "optimizer steps");
  auto* pre_o_b = pre->add_option("--batch-size", pre_batch, "patches per step");
  auto* pre_o_seed = pre->add_option("--seed", pre_seed, "run seed");
  pre->callback([&] {
    const json j = load_config(pre_cfg_path);
    merge(pre_o_ds, j, "dataset", pre_dataset);
    merge(pre_o_obj, j, "objective", pre_objective);
    merge(pre_o_aug, j, "aug_strength", pre_aug);
    merge(pre_o_arch, j, "arch", pre_arch);
    merge(pre_o_it, j, "iterations", pre_iters);
    merge(pre_o_b, j, "batch_size", pre_batch);
    merge(pre_o_seed, j, "seed", pre_seed);
    if (pre_dataset.empty()) throw std::invalid_argument("pretrain requires --dataset");
    int fusion_width = 10, checkpoint_every = 0;
    merge(nullptr, j, "fusion_width", fusion_width);
    merge(nullptr, j, "checkpoint_every", checkpoint_every);

    ensure_out_dir(pre_out);
    Manifest man;
    man.command = "pretrain";
    man.seed = pre_seed;

    DatasetBundle ds = load_bundle(pre_dataset);
    SslConfig sc;
    sc.objective = pre_objective;
    sc.iterations = pre_iters;
    sc.batch = pre_batch;
    sc.seed = pre_seed;
    sc.aug = AugmentConfig::preset(pre_aug);
    sc.checkpoint_every = checkpoint_every;
    sc.checkpoint_prefix = pre_out + "/checkpoint";
    merge(nullptr, j, "temperature", sc.temperature);
    merge(nullptr, j, "vic_lambda", sc.vic_lambda);
    merge(nullptr, j, "vic_mu", sc.vic_mu);
    merge(nullptr, j, "vic_nu", sc.vic_nu);
    merge(nullptr, j, "lr", sc.lars.lr);
    merge(nullptr, j, "weight_decay", sc.lars.weight_decay);

    std::unique_ptr<Encoder> enc = build_encoder(pre_arch, ds, pre_seed, fusion_width);
    SslResult res = pretrain(*enc, ds, sc);
    const std::string wpath = pre_out + "/encoder.cimw";
    const std::string lpath = pre_out + "/loss.csv";
    enc->save(wpath);
    write_loss_csv(res.loss_history, lpath);

    man.config = {{"dataset", pre_dataset},   {"objective", sc.objective},
                  {"arch", pre_arch},         {"iterations", sc.iterations},
                  {"batch_size", sc.batch},   {"seed", sc.seed},
                  {"aug_strength", pre_aug},  {"temperature", sc.temperature},
                  {"lr", sc.lars.lr},         {"fusion_width", fusion_width},
                  {"checkpoint_every", checkpoint_every}};
    man.artifacts = {wpath, lpath};
    man.write(pre_out);
    std::cout << "pretrained " << pre_arch << " for " << sc.iterations
              << " iterations, final loss " << std::setprecision(6)
              << res.loss_history.back() << ", weights at " << wpath << "\n";
  });

  // ---- train-sup ----------------------------------------------------------
  auto* sup = app.add_subcommand("train-sup", "supervised training with class weighting");
  std::string sup_out = ".", sup_cfg_path, sup_dataset, sup_aug = "default", sup_arch = "cim";
  int sup_epochs = 30, sup_batch = 64;
  uint64_t sup_seed = 1;
  sup->add_option("--out-dir", sup_out, "output directory");
  sup->add_option("--config", sup_cfg_path, "JSON config file");
  auto* sup_o_ds = sup->add_option("--dataset", sup_dataset, "MPXD dataset path");
  auto* sup_o_aug = sup->add_option("--aug-strength", sup_aug, "augmentation preset")
                        ->check(CLI::IsMember({"weak", "default", "strong"}));
  auto* sup_o_arch =
      sup->add_option("--arch", sup_arch, "encoder architecture")->check(CLI::IsMember({"cim", "fusion"}));
  auto* sup_o_ep = sup->add_option("--epochs", sup_epochs, "training epochs");
  auto* sup_o_b = sup->add_option("--batch-size", sup_batch, "patches per step");
  auto* sup_o_seed = sup->add_option("--seed", sup_seed, "run seed");
  sup->callback([&] {
    const json j = load_config(sup_cfg_path);
    merge(sup_o_ds, j, "dataset", sup_dataset);
    merge(sup_o_aug, j, "aug_strength", sup_aug);
    merge(sup_o_arch, j, "arch", sup_arch);
    merge(sup_o_ep, j, "epochs", sup_epochs);
    merge(sup_o_b, j, "batch_size", sup_batch);
    merge(sup_o_seed, j, "seed", sup_seed);
    if (sup_dataset.empty()) throw std::invalid_argument("train-sup requires --dataset");
    int fusion_width = 10;
    double lr = 1e-3;
    merge(nullptr, j, "fusion_width", fusion_width);
    merge(nullptr, j, "lr", lr);

    ensure_out_dir(sup_out);
    Manifest man;
    man.command = "train-sup";
    man.seed = sup_seed;

    DatasetBundle ds = load_bundle(sup_dataset);
    TrainConfig tc;
    tc.epochs = sup_epochs;
    tc.batch = sup_batch;
    tc.lr = lr;
    tc.seed = sup_seed;
    tc.aug = AugmentConfig::preset(sup_aug);

    std::unique_ptr<Encoder> enc = build_encoder(sup_arch, ds, sup_seed, fusion_width);
    EvalReport rep = train_supervised(*enc, ds, tc);
    const std::string wpath = sup_out + "/encoder_supervised.cimw";
    const std::string rpath = sup_out + "/report.json";
    const std::string cpath = sup_out + "/confusion.csv";
    enc->save(wpath);
    write_text(rpath, rep.to_json());
    rep.write_confusion_csv(cpath);

    man.config = {{"dataset", sup_dataset}, {"arch", sup_arch},      {"epochs", tc.epochs},
                  {"batch_size", tc.batch}, {"lr", tc.lr},           {"seed", tc.seed},
                  {"aug_strength", sup_aug}, {"fusion_width", fusion_width}};
    man.artifacts = {wpath, rpath, cpath};
    man.write(sup_out);
    std::cout << "test accuracy " << std::setprecision(4) << rep.accuracy
              << ", balanced accuracy " << rep.balanced_accuracy << " (best epoch "
              << rep.best_epoch << ")\n";
  });

  // ---- linear-eval --------------------------------------------------------
  auto* lin = app.add_subcommand("linear-eval", "linear probe on a frozen encoder");
  std::string lin_out = ".", lin_cfg_path, lin_dataset, lin_weights, lin_arch = "cim";
  int lin_epochs = 30, lin_batch = 64;
  uint64_t lin_seed = 1;
  lin->add_option("--out-dir", lin_out, "output directory");
  lin->add_option("--config", lin_cfg_path, "JSON config file");
  auto* lin_o_ds = lin->add_option("--dataset", lin_dataset, "MPXD dataset path");
  auto* lin_o_w = lin->add_option("--weights", lin_weights, "encoder weights (CIMW)");
  auto* lin_o_arch =
      lin->add_option("--arch", lin_arch, "encoder architecture")->check(CLI::IsMember({"cim", "fusion"}));
  auto* lin_o_ep = lin->add_option("--epochs", lin_epochs, "probe epochs");
  auto* lin_o_b = lin->add_option("--batch-size", lin_batch, "patches per step");
  auto* lin_o_seed = lin->add_option("--seed", lin_seed, "run seed");
  lin->callback([&] {
    const json j = load_config(lin_cfg_path);
    merge(lin_o_ds, j, "dataset", lin_dataset);
    merge(lin_o_w, j, "weights", lin_weights);
    merge(lin_o_arch, j, "arch", lin_arch);
    merge(lin_o_ep, j, "epochs", lin_epochs);
    merge(lin_o_b, j, "batch_size", lin_batch);
    merge(lin_o_seed, j, "seed", lin_seed);
    if (lin_dataset.empty()) throw std::invalid_argument("linear-eval requires --dataset");
    if (lin_weights.empty()) throw std::invalid_argument("linear-eval requires --weights");
    double lr = 1e-3;
    merge(nullptr, j, "lr", lr);

    ensure_out_dir(lin_out);
    Manifest man;
    man.command = "linear-eval";
    man.seed = lin_seed;

    DatasetBundle ds = load_bundle(lin_dataset);
    std::unique_ptr<Encoder> enc = load_encoder(lin_arch, lin_weights);
    TrainConfig tc;
    tc.epochs = lin_epochs;
    tc.batch = lin_batch;
    tc.lr = lr;
    tc.seed = lin_seed;
    EvalReport rep = linear_eval(*enc, ds, tc);
    const std::string rpath = lin_out + "/report.json";
    const std::string cpath = lin_out + "/confusion.csv";
    write_text(rpath, rep.to_json());
    rep.write_confusion_csv(cpath);

    man.config = {{"dataset", lin_dataset}, {"weights", lin_weights}, {"arch", lin_arch},
                  {"epochs", tc.epochs},    {"batch_size", tc.batch}, {"lr", tc.lr},
                  {"seed", tc.seed}};
    man.artifacts = {rpath, cpath};
    man.write(lin_out);
    std::cout << "probe accuracy " << std::setprecision(4) << rep.accuracy
              << ", balanced accuracy " << rep.balanced_accuracy << "\n";
  });

  // ---- explain ------------------------------------------------------------
  auto* exp = app.add_subcommand("explain", "relevance maps for dataset patches");
  std::string exp_out = ".", exp_cfg_path, exp_dataset, exp_weights, exp_split = "all";
  exp->add_option("--out-dir", exp_out, "output directory");
  exp->add_option("--config", exp_cfg_path, "JSON config file (relevance settings)");
  auto* exp_o_ds = exp->add_option("--dataset", exp_dataset, "MPXD dataset path");
  auto* exp_o_w = exp->add_option("--weights", exp_weights, "encoder weights (CIMW)");
  exp->add_option("--split", exp_split, "train|val|test|all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  exp->callback([&] {
    const json j = load_config(exp_cfg_path);
    merge(exp_o_ds, j, "dataset", exp_dataset);
    merge(exp_o_w, j, "weights", exp_weights);
    if (exp_dataset.empty()) throw std::invalid_argument("explain requires --dataset");
    if (exp_weights.empty()) throw std::invalid_argument("explain requires --weights");
    const LrpConfig lc = lrp_from_json(j);

    ensure_out_dir(exp_out);
    Manifest man;
    man.command = "explain";

    DatasetBundle ds = load_bundle(exp_dataset);
    CimModel model = CimModel::load(exp_weights);
    require(model.cfg.markers == ds.channels(), "weights and dataset disagree on panel size");
    const std::vector<int> idx = select_split(ds, exp_split);

    std::vector<RelevanceMap> maps;
    maps.reserve(idx.size());
    const int chunk = 64;
    for (size_t start = 0; start < idx.size(); start += chunk) {
      const size_t stop = std::min(idx.size(), start + chunk);
      const std::vector<int> part(idx.begin() + static_cast<ptrdiff_t>(start),
                                  idx.begin() + static_cast<ptrdiff_t>(stop));
      for (RelevanceMap& m : lrp_explain_batch(model, ds.gather_patches(part), lc))
        maps.push_back(std::move(m));
    }
    const std::string mpath = exp_out + "/relevance.rlvm";
    save_relevance_maps(mpath, maps, idx);

    man.config = lrp_to_json(lc);
    man.config["dataset"] = exp_dataset;
    man.config["weights"] = exp_weights;
    man.config["split"] = exp_split;
    man.artifacts = {mpath};
    man.write(exp_out);
    std::cout << "explained " << maps.size() << " patches into " << mpath << "\n";
  });

  // ---- phenotype ----------------------------------------------------------
  auto* phe = app.add_subcommand("phenotype", "label-free phenotype assignment");
  std::string phe_out = ".", phe_cfg_path, phe_dataset, phe_weights, phe_split = "test";
  phe->add_option("--out-dir", phe_out, "output directory");
  phe->add_option("--config", phe_cfg_path, "JSON config file (relevance settings)");
  auto* phe_o_ds = phe->add_option("--dataset", phe_dataset, "MPXD dataset path");
  auto* phe_o_w = phe->add_option("--weights", phe_weights, "encoder weights (CIMW)");
  phe->add_option("--split", phe_split, "train|val|test|all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  phe->callback([&] {
    const json j = load_config(phe_cfg_path);
    merge(phe_o_ds, j, "dataset", phe_dataset);
    merge(phe_o_w, j, "weights", phe_weights);
    if (phe_dataset.empty()) throw std::invalid_argument("phenotype requires --dataset");
    if (phe_weights.empty()) throw std::invalid_argument("phenotype requires --weights");
    const LrpConfig lc = lrp_from_json(j);

    ensure_out_dir(phe_out);
    Manifest man;
    man.command = "phenotype";

    DatasetBundle ds = load_bundle(phe_dataset);
    require(!ds.modules.empty(), "dataset sidecar declares no marker modules");
    CimModel model = CimModel::load(phe_weights);
    require(model.cfg.markers == ds.channels(), "weights and dataset disagree on panel size");
    const std::vector<int> idx = select_split(ds, phe_split);
    const std::vector<int> labels = ds.gather_labels(idx);
    const PhenotypingResult res = phenotype_patches(model, ds.gather_patches(idx), ds.modules, lc);

    const std::string apath = phe_out + "/assignments.csv";
    {
      std::ofstream os(apath);
      if (!os) throw IoError("cannot write: " + apath);
      os << "patch_id,label,assigned,assigned_name,margin,tie";
      for (const MarkerModule& m : ds.modules) os << ",score_" << m.name;
      os << "\n" << std::setprecision(10);
      for (size_t i = 0; i < res.assignments.size(); ++i) {
        const PhenotypeAssignment& a = res.assignments[i];
        os << idx[i] << "," << labels[i] << "," << a.chosen << ","
           << ds.modules[static_cast<size_t>(a.chosen)].name << "," << a.margin << ","
           << (a.tie ? 1 : 0);
        for (double s : a.module_scores) os << "," << s;
        os << "\n";
      }
    }

    // agreement against generator truth, per class and overall
    json per_class = json::object();
    int hits = 0;
    std::map<int, std::pair<int, int>> by_class;
    for (size_t i = 0; i < res.assignments.size(); ++i) {
      auto& c = by_class[labels[i]];
      ++c.first;
      if (res.assignments[i].chosen == labels[i]) {
        ++c.second;
        ++hits;
      }
    }
    for (const auto& [label, counts] : by_class) {
      const std::string name = label < static_cast<int>(ds.phenotype_names.size())
                                   ? ds.phenotype_names[static_cast<size_t>(label)]
                                   : std::to_string(label);
      per_class[name] = {{"count", counts.first},
                         {"agreement", static_cast<double>(counts.second) / counts.first}};
    }
    json summary = {{"count", res.assignments.size()},
                    {"overall_agreement",
                     res.assignments.empty() ? 0.0
                                             : static_cast<double>(hits) / res.assignments.size()},
                    {"per_class", per_class}};
    const std::string spath = phe_out + "/phenotype_report.json";
    write_text(spath, summary.dump(2));

    man.config = lrp_to_json(lc);
    man.config["dataset"] = phe_dataset;
    man.config["weights"] = phe_weights;
    man.config["split"] = phe_split;
    man.artifacts = {apath, spath};
    man.write(phe_out);
    std::cout << "assigned " << res.assignments.size() << " patches, agreement "
              << std::setprecision(4) << summary["overall_agreement"].get<double>() << "\n";
  });

  // ---- report -------------------------------------------------------------
  auto* repc = app.add_subcommand("report", "join two evaluation reports into a comparison");
  std::string rep_out = ".", rep_cim, rep_base;
  repc->add_option("--out-dir", rep_out, "output directory");
  repc->add_option("--cim", rep_cim, "report.json of the channel-independent model")->required();
  repc->add_option("--baseline", rep_base, "report.json of the early-fusion baseline")->required();
  repc->callback([&] {
    ensure_out_dir(rep_out);
    Manifest man;
    man.command = "report";

    const json a = read_report(rep_cim);
    const json b = read_report(rep_base);
    json cmp = {{"cim", a},
                {"baseline", b},
                {"delta",
                 {{"accuracy", a["accuracy"].get<double>() - b["accuracy"].get<double>()},
                  {"balanced_accuracy", a["balanced_accuracy"].get<double>() -
                                            b["balanced_accuracy"].get<double>()}}}};
    const std::string cpath = rep_out + "/comparison.json";
    write_text(cpath, cmp.dump(2));

    const auto ra = a["per_class_recall"].get<std::vector<double>>();
    const auto rb = b["per_class_recall"].get<std::vector<double>>();
    require(ra.size() == rb.size(), "reports cover different class counts");
    const std::string csvpath = rep_out + "/per_class_recall.csv";
    {
      std::ofstream os(csvpath);
      if (!os) throw IoError("cannot write: " + csvpath);
      os << "class,cim_recall,baseline_recall\n" << std::setprecision(10);
      for (size_t k = 0; k < ra.size(); ++k)
        os << k << "," << ra[k] << "," << rb[k] << "\n";
    }

    man.config = {{"cim", rep_cim}, {"baseline", rep_base}};
    man.artifacts = {cpath, csvpath};
    man.write(rep_out);
    std::cout << "balanced accuracy delta "
              << cmp["delta"]["balanced_accuracy"].get<double>() << ", table at " << cpath
              << "\n";
  });

  // ---- grad-check ---------------------------------------------------------
  auto* gc = app.add_subcommand("grad-check", "central-difference check of the autodiff graph");
  std::string gc_out = ".";
  uint64_t gc_seed = 3;
  gc->add_option("--out-dir", gc_out, "output directory");
  gc->add_option("--seed", gc_seed, "parameter init seed");
  gc->callback([&] {
    ensure_out_dir(gc_out);
    Manifest man;
    man.command = "grad-check";
    man.seed = gc_seed;

    Rng rng(gc_seed);
    double worst = 0.0;

    {
      Tensor x = Tensor::rand_uniform({2, 4, 5, 5}, rng, -1.0, 1.0);
      Tensor w = Tensor::rand_uniform({6, 2, 3, 3}, rng, -0.5, 0.5);
      Tensor b = Tensor::rand_uniform({6}, rng, -0.2, 0.2);
      worst = std::max(worst, grad_check_many(
                                  [](Tape& t, const std::vector<int>& ids) {
                                    return t.sum_all(t.relu(
                                        t.conv2d_grouped(ids[0], ids[1], ids[2], 2, 1, 1)));
                                  },
                                  {x, w, b}));
    }
    {
      Tensor z = Tensor::rand_uniform({6, 8}, rng, -1.0, 1.0);
      worst = std::max(worst, grad_check([](Tape& t, int id) {
                         return t.ntxent_from_sims(t.scale(
                             t.matmul_nt(t.l2_normalize_rows(id), t.l2_normalize_rows(id)),
                             1.0 / 0.2));
                       },
                                         z));
      Tensor za = Tensor::rand_uniform({5, 7}, rng, -1.0, 1.0);
      Tensor zb = Tensor::rand_uniform({5, 7}, rng, -1.0, 1.0);
      worst = std::max(worst, grad_check_many(
                                  [](Tape& t, const std::vector<int>& ids) {
                                    return t.vicreg_node(ids[0], ids[1], 25.0, 25.0, 1.0);
                                  },
                                  {za, zb}));
    }
    {
      CimConfig cfg;
      cfg.markers = 3;
      cfg.width = 2;
      cfg.depth = 1;
      cfg.se_reduction = 2;
      cfg.input_hw = 8;
      cfg.proj_dim = 6;
      cfg.seed = gc_seed;
      CimModel m = CimModel::build(cfg);
      Tensor batch = Tensor::rand_uniform({4, 3, 8, 8}, rng, 0.0, 1.0);
      std::vector<Tensor> points;
      for (auto& p : m.parameters()) points.push_back(*p.value);
      points.push_back(batch);
      worst = std::max(worst, grad_check_many(
                                  [&](Tape& t, const std::vector<int>& ids) {
                                    m.stem_bn = BnStats::make(m.cfg.feat_dim());
                                    m.blocks[0].bn1 = BnStats::make(m.cfg.feat_dim());
                                    m.blocks[0].bn2 = BnStats::make(m.cfg.feat_dim());
                                    std::vector<int> pids(ids.begin(), ids.end() - 1);
                                    int pooled = m.features(t, pids, ids.back(), Mode::train);
                                    int proj = m.projection(t, pids, pooled);
                                    int sims = t.scale(t.matmul_nt(t.l2_normalize_rows(proj),
                                                                   t.l2_normalize_rows(proj)),
                                                       1.0 / 0.2);
                                    return t.ntxent_from_sims(sims);
                                  },
                                  points));
    }

    const std::string jpath = gc_out + "/gradcheck.json";
    json out = {{"max_relative_error", worst}, {"threshold", 1e-4}};
    write_text(jpath, out.dump(2));
    man.config = json::object();
    man.artifacts = {jpath};
    man.write(gc_out);
    std::cout << "max relative error: " << std::scientific << std::setprecision(3) << worst
              << "\n";
    if (!(worst < 1e-4))
      throw NumericError("gradient check failed: max relative error " + std::to_string(worst));
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const IoError& e) {
    std::cerr << json{{"error", "io"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << json{{"error", "numeric"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
