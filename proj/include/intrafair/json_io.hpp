#pragma once

#include "intrafair/harness.hpp"

#include <json.hpp>

#include <filesystem>

namespace intrafair {

using Json = nlohmann::json;

Json to_json(const EvalReport& report);
Json to_json(const TraceEntry& entry);
Json to_json(const MethodOutcome& outcome);
Json to_json(const TrialResult& trial);
Json to_json(const AggregateRow& row);
Json to_json(const VarianceReport& report);
Json to_json(const SensitivityReport& report);
Json to_json(const TrainResult& result);

/// Pretty-printed with a trailing newline.
void write_json(const Json& j, const std::filesystem::path& path);

}  // namespace intrafair
