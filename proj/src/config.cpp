#include "wsseg/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#ifndef WSSEG_DATA_DIR
#define WSSEG_DATA_DIR "data"
#endif

namespace fs = std::filesystem;

namespace wsseg {

Json default_config() {
  return Json::parse(R"({
  "seed": 0,
  "encoder": {
    "name": "mock",
    "weights": "",
    "patch_grid_side": 14,
    "patch_size": 16,
    "vit_dim": 64,
    "text_dim": 64,
    "embed_dim": 64,
    "tap_layers": [2, 5, 8, 11],
    "layer_index_base": 0,
    "tap_point": "post",
    "image_blocks": 12,
    "text_blocks": 12,
    "heads": 4,
    "mlp_ratio": 2,
    "seed": 1234,
    "weight_scale": 1.0
  },
  "model": {
    "d_ref": 512,
    "res_blocks": 2,
    "groupnorm_groups": 8,
    "share_refiner": false,
    "level_norm_act": true,
    "n_ctx": 16,
    "n_desc": 10,
    "ctx_init_std": 0.02,
    "template": "a histopathology image of",
    "class_specific_ctx": true,
    "n_img": 10,
    "d_img": 64,
    "reduction": "max",
    "logit_scale_init": 2.6592600369327779
  },
  "train": {
    "lr": 1e-5,
    "weight_decay": 0.001,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
    "batch_size": 8,
    "epochs": 20,
    "lambdas": [1.0, 1.0, 1.0, 1.0],
    "align_weight": 0.0,
    "diversity_weight": 0.0,
    "pooling": "avg"
  },
  "data": {
    "root": "",
    "classes": ["TUM", "STR", "LYM", "NEC"],
    "label_pattern": "",
    "image_dir": "img",
    "mask_dir": "mask",
    "descriptions_dir": "",
    "mean": 0.5,
    "std": 0.5,
    "ignore_value": 0,
    "mask_offset": 1
  },
  "crf": {
    "enabled": false,
    "iterations": 10,
    "w_gauss": 3.0,
    "w_bilateral": 5.0,
    "theta_gamma": 3.0,
    "theta_alpha": 60.0,
    "theta_beta": 10.0
  },
  "eval": {
    "auc_aggregation": "max"
  }
})");
}

std::vector<std::string> unknown_keys(const Json& schema, const Json& user, const std::string& prefix) {
  std::vector<std::string> out;
  if (!user.is_object()) return out;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.is_object() || !schema.contains(it.key())) {
      out.push_back(path);
      continue;
    }
    const Json& s = schema.at(it.key());
    if (s.is_object()) {
      auto nested = unknown_keys(s, it.value(), path);
      out.insert(out.end(), nested.begin(), nested.end());
    }
  }
  return out;
}

namespace {

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(Json& base, const Json& user, const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key " + path + " must be an object");
      merge_into(slot, it.value(), path);
    } else {
      if (!same_kind(slot, it.value()))
        throw ConfigError("config key " + path + " expects " + std::string(slot.type_name()) + ", got " +
                          it.value().type_name());
      slot = it.value();
    }
  }
}

}  // namespace

Json merge_config(const Json& base, const Json& user) {
  if (!user.is_object()) throw ConfigError("configuration must be a JSON object");
  const auto unknown = unknown_keys(base, user);
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  Json out = base;
  merge_into(out, user, "");
  return out;
}

void apply_override(Json& layer, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &layer;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    Json& next = (*node)[parts[i]];
    if (!next.is_object()) next = Json::object();
    node = &next;
  }
  (*node)[parts.back()] = value;
}

Json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  try {
    return Json::parse(f, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string encoder_name(const Json& cfg) { return cfg.at("encoder").at("name").get<std::string>(); }

MockEncoderConfig encoder_config(const Json& cfg) {
  const Json& e = cfg.at("encoder");
  MockEncoderConfig m;
  m.spec.patch_grid_side = e.at("patch_grid_side").get<int64_t>();
  m.spec.patch_size = e.at("patch_size").get<int64_t>();
  m.spec.vit_dim = e.at("vit_dim").get<int64_t>();
  m.spec.text_dim = e.at("text_dim").get<int64_t>();
  m.spec.embed_dim = e.at("embed_dim").get<int64_t>();
  m.spec.tap_layers = e.at("tap_layers").get<std::vector<int64_t>>();
  m.spec.layer_index_base = e.at("layer_index_base").get<int64_t>();
  const std::string tp = e.at("tap_point").get<std::string>();
  if (tp == "post")
    m.spec.tap_point = TapPoint::kPostBlock;
  else if (tp == "pre")
    m.spec.tap_point = TapPoint::kPreBlock;
  else
    throw ConfigError("encoder.tap_point must be \"pre\" or \"post\", got " + tp);
  m.image_blocks = e.at("image_blocks").get<int64_t>();
  m.text_blocks = e.at("text_blocks").get<int64_t>();
  m.heads = e.at("heads").get<int64_t>();
  m.mlp_ratio = e.at("mlp_ratio").get<int64_t>();
  m.seed = e.at("seed").get<uint64_t>();
  m.weight_scale = e.at("weight_scale").get<double>();
  return m;
}

ModelConfig model_config(const Json& cfg) {
  const Json& m = cfg.at("model");
  ModelConfig mc;
  mc.pyramid.d_ref = m.at("d_ref").get<int64_t>();
  mc.pyramid.res_blocks = m.at("res_blocks").get<int64_t>();
  mc.pyramid.groupnorm_groups = m.at("groupnorm_groups").get<int64_t>();
  mc.pyramid.share_refiner = m.at("share_refiner").get<bool>();
  mc.pyramid.level_norm_act = m.at("level_norm_act").get<bool>();
  mc.prompts.n_ctx = m.at("n_ctx").get<int64_t>();
  mc.prompts.n_desc = m.at("n_desc").get<int64_t>();
  mc.prompts.sigma = m.at("ctx_init_std").get<double>();
  mc.prompts.template_text = m.at("template").get<std::string>();
  mc.prompts.class_specific = m.at("class_specific_ctx").get<bool>();
  mc.bank.n_img_per_class = m.at("n_img").get<int64_t>();
  mc.bank.d_img = m.at("d_img").get<int64_t>();
  const std::string red = m.at("reduction").get<std::string>();
  if (red == "max")
    mc.reduction = ag::Reduction::kMax;
  else if (red == "mean")
    mc.reduction = ag::Reduction::kMean;
  else
    throw ConfigError("model.reduction must be \"max\" or \"mean\", got " + red);
  mc.logit_scale_init = m.at("logit_scale_init").get<double>();
  mc.seed = cfg.at("seed").get<uint64_t>();
  return mc;
}

TrainConfig train_config(const Json& cfg) {
  const Json& t = cfg.at("train");
  TrainConfig tc;
  tc.lr = t.at("lr").get<double>();
  tc.weight_decay = t.at("weight_decay").get<double>();
  const auto betas = t.at("betas").get<std::vector<double>>();
  if (betas.size() != 2) throw ConfigError("train.betas must hold two numbers");
  tc.beta1 = betas[0];
  tc.beta2 = betas[1];
  tc.eps = t.at("eps").get<double>();
  tc.batch_size = t.at("batch_size").get<int64_t>();
  tc.epochs = t.at("epochs").get<int64_t>();
  const auto lambdas = t.at("lambdas").get<std::vector<double>>();
  if (lambdas.size() != 4) throw ConfigError("train.lambdas must hold four numbers");
  std::copy(lambdas.begin(), lambdas.end(), tc.loss.level_weights.begin());
  tc.loss.align_weight = t.at("align_weight").get<double>();
  tc.loss.diversity_weight = t.at("diversity_weight").get<double>();
  const std::string pool = t.at("pooling").get<std::string>();
  if (pool == "avg")
    tc.loss.pooling = ag::Pooling::kAverage;
  else if (pool == "max")
    tc.loss.pooling = ag::Pooling::kMax;
  else
    throw ConfigError("train.pooling must be \"avg\" or \"max\", got " + pool);
  tc.seed = cfg.at("seed").get<uint64_t>();
  tc.ignore_index = -1;
  return tc;
}

CrfParams crf_params(const Json& cfg) {
  const Json& c = cfg.at("crf");
  CrfParams p;
  p.iterations = c.at("iterations").get<int64_t>();
  p.w_gauss = c.at("w_gauss").get<double>();
  p.w_bilateral = c.at("w_bilateral").get<double>();
  p.theta_gamma = c.at("theta_gamma").get<double>();
  p.theta_alpha = c.at("theta_alpha").get<double>();
  p.theta_beta = c.at("theta_beta").get<double>();
  p.validate();
  return p;
}

std::vector<std::string> class_names(const Json& cfg) {
  auto names = cfg.at("data").at("classes").get<std::vector<std::string>>();
  if (names.empty()) throw ConfigError("data.classes must not be empty");
  return names;
}

LayoutConfig layout_config(const Json& cfg) {
  const Json& d = cfg.at("data");
  LayoutConfig l;
  l.num_classes = static_cast<int64_t>(class_names(cfg).size());
  const std::string pat = d.at("label_pattern").get<std::string>();
  if (!pat.empty()) l.label_pattern = pat;
  l.image_dir = d.at("image_dir").get<std::string>();
  l.mask_dir = d.at("mask_dir").get<std::string>();
  return l;
}

LoadOptions load_options(const Json& cfg, int64_t expected_side) {
  const Json& d = cfg.at("data");
  LoadOptions o;
  o.mean = d.at("mean").get<double>();
  o.std = d.at("std").get<double>();
  o.mask.ignore_value = d.at("ignore_value").get<int32_t>();
  o.mask.offset = d.at("mask_offset").get<int32_t>();
  o.expected_side = expected_side;
  return o;
}

AucAggregation auc_aggregation(const Json& cfg) {
  const std::string a = cfg.at("eval").at("auc_aggregation").get<std::string>();
  if (a == "max") return AucAggregation::kMax;
  if (a == "mean") return AucAggregation::kMean;
  throw ConfigError("eval.auc_aggregation must be \"max\" or \"mean\", got " + a);
}

std::vector<std::vector<std::string>> load_descriptions(const Json& cfg) {
  std::string dir = cfg.at("data").at("descriptions_dir").get<std::string>();
  if (dir.empty()) dir = std::string(WSSEG_DATA_DIR) + "/descriptions";
  std::vector<std::vector<std::string>> out;
  for (const std::string& name : class_names(cfg)) {
    const fs::path p = fs::path(dir) / (name + ".txt");
    std::ifstream f(p);
    if (!f) throw ConfigError("cannot read descriptions for class " + name + " from " + p.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
      const auto b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos || line[b] == '#') continue;
      const auto e = line.find_last_not_of(" \t\r");
      lines.push_back(line.substr(b, e - b + 1));
    }
    if (lines.empty()) throw ConfigError(p.string() + " holds no descriptions");
    out.push_back(std::move(lines));
  }
  return out;
}

std::shared_ptr<const VisionLanguageEncoder> build_encoder(const Json& cfg) {
  return make_encoder(encoder_name(cfg), encoder_config(cfg), cfg.at("encoder").at("weights").get<std::string>());
}

std::unique_ptr<Model> build_model(const Json& cfg, std::shared_ptr<const VisionLanguageEncoder> encoder) {
  if (!encoder) encoder = build_encoder(cfg);
  const ModelConfig mc = model_config(cfg);
  auto desc = mc.prompts.n_desc > 0 ? load_descriptions(cfg) : std::vector<std::vector<std::string>>{};
  return std::make_unique<Model>(std::move(encoder), class_names(cfg), std::move(desc), mc);
}

}  // namespace wsseg
