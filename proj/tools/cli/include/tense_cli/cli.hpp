#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace CLI {
class App;
}

namespace tense::cli {

inline constexpr const char* kToolName = "tense-attr";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kUsage = 2, kConfig = 3, kRuntime = 4 };

/// Invalid configuration value; `field` is the dotted key path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// State shared by a subcommand run; collects what goes into run_manifest.json.
struct RunContext {
  std::string subcommand;
  std::filesystem::path out;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::array();
  std::vector<std::uint64_t> seeds;

  /// Path under `out`, recorded as an output.
  std::filesystem::path output(const std::string& name);
  void input(const std::string& key, const std::filesystem::path& path) { inputs[key] = path.string(); }
};

using Runner = std::function<void(RunContext&)>;

struct Command {
  std::string name;
  std::string description;
  /// Registers options on the subcommand and returns the runner.
  std::function<Runner(CLI::App&)> setup;
};

const std::vector<Command>& commands();

/// Flattens nested objects into dotted keys.
std::map<std::string, nlohmann::json> flatten_config(const nlohmann::json& j);

/// Parses argv, runs the subcommand and writes the run manifest. Messages go
/// to `out`/`err`; errors are one JSON line on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tense::cli
