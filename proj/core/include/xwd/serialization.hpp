#pragma once

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "xwd/ensemble.hpp"
#include "xwd/ingestion.hpp"
#include "xwd/model.hpp"
#include "xwd/training.hpp"
#include "xwd/windowing.hpp"

namespace xwd {

// Readers fill only the keys present, so partial objects keep the defaults.
// Unknown keys raise InvalidConfig.
void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                        const std::string& context);

void to_json(nlohmann::json& j, BlockKind k);
void from_json(const nlohmann::json& j, BlockKind& k);
void to_json(nlohmann::json& j, TaskMode m);
void from_json(const nlohmann::json& j, TaskMode& m);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const NormStats& s);
void from_json(const nlohmann::json& j, NormStats& s);
void to_json(nlohmann::json& j, const WindowSpec& w);
void from_json(const nlohmann::json& j, WindowSpec& w);
void to_json(nlohmann::json& j, const TissueClass& t);
void from_json(const nlohmann::json& j, TissueClass& t);
void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);
void to_json(nlohmann::json& j, const SamplingPlan& p);
void from_json(const nlohmann::json& j, SamplingPlan& p);
void to_json(nlohmann::json& j, const SplitFractions& f);
void from_json(const nlohmann::json& j, SplitFractions& f);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const MetaLearner& m);
void from_json(const nlohmann::json& j, MetaLearner& m);

}  // namespace xwd
