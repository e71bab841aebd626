#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace lexlm {

/// Exit codes: 0 success, 1 usage error, 2 data or format error.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

/// Default run configuration: {"model", "optimizer", "train", "paths"}.
nlohmann::json default_run_config();
/// Merges `overrides` into the defaults. Unknown keys throw UsageError.
nlohmann::json merge_run_config(const nlohmann::json& overrides);
/// Applies "a.b=value" (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace lexlm
