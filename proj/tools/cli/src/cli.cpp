#include "tense_cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "tense/error.hpp"
#include "tense/io.hpp"
#include "tense/parallel.hpp"

namespace tense::cli {

using nlohmann::json;

std::filesystem::path RunContext::output(const std::string& name) {
  const auto p = out / name;
  outputs.push_back(p.string());
  return p;
}

namespace {

void flatten_into(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      flatten_into(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    return;
  }
  out[prefix] = j;
}

std::vector<std::string> config_values(const std::string& key, const json& v) {
  auto scalar = [&](const json& x) -> std::string {
    if (x.is_string()) return x.get<std::string>();
    if (x.is_boolean()) return x.get<bool>() ? "true" : "false";
    if (x.is_number()) return x.dump();
    throw ConfigError(key, "expected a string, number, boolean or array");
  };
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& x : v) out.push_back(scalar(x));
  } else {
    out.push_back(scalar(v));
  }
  return out;
}

void emit_error(std::ostream& err, const std::string& kind, const std::string& field,
                const std::string& message) {
  json j{{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  err << j.dump() << "\n";
}

std::string option_key(const CLI::Option* opt) {
  std::string name = opt->get_single_name();
  return name;
}

json resolved_config(const CLI::App& sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string key = option_key(opt);
    if (key == "help" || key.empty()) continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      cfg[key] = r.size() == 1 ? json(r.front()) : json(r);
    } else {
      const std::string d = opt->get_default_str();
      cfg[key] = d.empty() ? json(nullptr) : json(d);
    }
  }
  return cfg;
}

std::size_t resolve_threads(const std::optional<std::size_t>& flag) {
  if (flag) {
    if (*flag == 0) throw ConfigError("threads", "must be at least 1");
    return *flag;
  }
  if (const char* env = std::getenv("TENSE_ATTR_THREADS"); env && *env) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(env, &pos);
      if (pos != std::string(env).size() || v < 1) throw std::invalid_argument("range");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("TENSE_ATTR_THREADS", std::string("expected a positive integer, got '") + env + "'");
    }
  }
  return 0;
}

}  // namespace

std::map<std::string, json> flatten_config(const json& j) {
  std::map<std::string, json> out;
  if (!j.is_object()) throw ConfigError("", "config file must hold a JSON object");
  flatten_into(j, "", out);
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature attribution experiments: toy superposition models, attribution\n"
               "selection, inversion and atlases on a synthetic curve convnet.",
               kToolName};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_path, "JSON file of option defaults (dotted keys); flags override");
  app.add_option("--threads", threads, "worker threads (fallback: TENSE_ATTR_THREADS, then all cores)");

  std::map<std::string, Runner> runners;
  for (const Command& c : commands()) {
    CLI::App* sub = app.add_subcommand(c.name, c.description);
    runners[c.name] = c.setup(*sub);
  }

  CLI::App* sub = nullptr;
  try {
    app.parse(argc, argv);
    sub = app.get_subcommands().front();
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    emit_error(err, "usage", "", e.what());
    return kUsage;
  }

  RunContext ctx;
  ctx.subcommand = sub->get_name();
  try {
    if (!config_path.empty()) {
      json j;
      {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("config", "cannot open " + config_path);
        try {
          j = json::parse(in);
        } catch (const json::exception& e) {
          throw ConfigError("config", std::string("not valid JSON: ") + e.what());
        }
      }
      for (const auto& [key, value] : flatten_config(j)) {
        if (key == "threads") {
          if (!threads) {
            if (!value.is_number_unsigned()) throw ConfigError(key, "expected a positive integer");
            threads = value.get<std::size_t>();
          }
          continue;
        }
        if (key == "config") continue;
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (!opt) throw ConfigError(key, "unknown key for '" + sub->get_name() + "'");
        if (opt->count() > 0 || value.is_null()) continue;
        try {
          for (const auto& v : config_values(key, value)) opt->add_result(v);
          opt->run_callback();
        } catch (const CLI::Error& e) {
          throw ConfigError(key, e.what());
        }
      }
      ctx.input("config", config_path);
    }
    for (const CLI::Option* opt : sub->get_options())
      if (opt->get_group() == "Required" && opt->count() == 0) {
        err << sub->help();
        emit_error(err, "usage", option_key(opt), "missing required option --" + option_key(opt));
        return kUsage;
      }
    set_max_threads(resolve_threads(threads));

    const auto t0 = std::chrono::steady_clock::now();
    runners.at(ctx.subcommand)(ctx);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!ctx.out.empty()) {
      json manifest{{"tool", kToolName},
                    {"version", kToolVersion},
                    {"subcommand", ctx.subcommand},
                    {"config", resolved_config(*sub)},
                    {"threads", max_threads()},
                    {"seeds", ctx.seeds},
                    {"inputs", ctx.inputs},
                    {"outputs", ctx.outputs},
                    {"duration_seconds", seconds}};
      write_text(ctx.out / "run_manifest.json", manifest.dump(2) + "\n");
    }
    out << ctx.subcommand << ": done in " << seconds << " s";
    if (!ctx.out.empty()) out << ", outputs under " << ctx.out.string();
    out << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    emit_error(err, "config", e.field(), e.what());
    return kConfig;
  } catch (const InvalidArgument& e) {
    emit_error(err, "config", "", e.what());
    return kConfig;
  } catch (const FormatError& e) {
    emit_error(err, "runtime", e.field(), e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    emit_error(err, "runtime", "", e.what());
    return kRuntime;
  }
}

}  // namespace tense::cli
