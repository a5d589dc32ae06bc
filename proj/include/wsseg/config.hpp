#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsseg/dataset.hpp"
#include "wsseg/encoder.hpp"
#include "wsseg/metrics.hpp"
#include "wsseg/pipeline.hpp"
#include "wsseg/postprocess.hpp"
#include "wsseg/training.hpp"

namespace wsseg {

using Json = nlohmann::json;

/// Every recognised key with its default value.
Json default_config();

/// Dotted paths present in `user` but absent from `schema`.
std::vector<std::string> unknown_keys(const Json& schema, const Json& user, const std::string& prefix = "");

/// Deep merge of `user` onto `base`. Unknown keys (all of them listed) or type changes raise ConfigError.
Json merge_config(const Json& base, const Json& user);

/// Applies "a.b.c=value"; the value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(Json& layer, const std::string& assignment);

Json read_json_file(const std::string& path);

/// Typed views of the resolved tree.
std::string encoder_name(const Json& cfg);
MockEncoderConfig encoder_config(const Json& cfg);
ModelConfig model_config(const Json& cfg);
TrainConfig train_config(const Json& cfg);
CrfParams crf_params(const Json& cfg);
LayoutConfig layout_config(const Json& cfg);
LoadOptions load_options(const Json& cfg, int64_t expected_side);
AucAggregation auc_aggregation(const Json& cfg);
std::vector<std::string> class_names(const Json& cfg);

/// Description lists per class from `<dir>/<CLASS>.txt`: one per line, blank lines and '#' comments skipped.
std::vector<std::vector<std::string>> load_descriptions(const Json& cfg);

std::shared_ptr<const VisionLanguageEncoder> build_encoder(const Json& cfg);
std::unique_ptr<Model> build_model(const Json& cfg, std::shared_ptr<const VisionLanguageEncoder> encoder = nullptr);

}  // namespace wsseg
