#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "spinnoise/harness.hpp"

namespace spinnoise {

namespace {

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool numeric = true;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  double out = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(out))
    throw ConfigError(key + ": not a finite number: '" + v + "'");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15) throw ConfigError(key + ": not an integer: '" + v + "'");
  return static_cast<long long>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(key + ": expected true/false: '" + v + "'");
}

// Hz-valued physical keys store angular frequencies internally.
Field hz(const std::string& key, double SimulationParams::*m) {
  return {key, [key, m](ExperimentConfig& c, const std::string& v) { c.params.*m = kTwoPi * to_double(key, v); },
          [m](const ExperimentConfig& c) { return fmt(c.params.*m / kTwoPi); }};
}

Field plain(const std::string& key, double SimulationParams::*m) {
  return {key, [key, m](ExperimentConfig& c, const std::string& v) { c.params.*m = to_double(key, v); },
          [m](const ExperimentConfig& c) { return fmt(c.params.*m); }};
}

Field cfg_double(const std::string& key, double ExperimentConfig::*m) {
  return {key, [key, m](ExperimentConfig& c, const std::string& v) { c.*m = to_double(key, v); },
          [m](const ExperimentConfig& c) { return fmt(c.*m); }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back({"recipe", [](ExperimentConfig& c, const std::string& v) { c.recipe = recipe_from_string(trim(v)); },
                 [](const ExperimentConfig& c) { return to_string(c.recipe); }, false});
    f.push_back(hz("omega_rabi_hz", &SimulationParams::rabi));
    f.push_back(hz("detuning_hz", &SimulationParams::detuning));
    f.push_back(hz("larmor_hz", &SimulationParams::larmor));
    f.push_back(hz("gamma0_hz", &SimulationParams::gamma0));
    f.push_back(hz("transit_hz", &SimulationParams::transit));
    f.push_back({"polarization",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::string t = trim(v);
                   if (t == "sigma") c.params.polarization = Polarization::sigma;
                   else if (t == "pi") c.params.polarization = Polarization::pi;
                   else throw ConfigError("polarization: expected sigma or pi: '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.params.polarization == Polarization::sigma ? "sigma" : "pi");
                 },
                 false});
    f.push_back(plain("noise_amplitude", &SimulationParams::noise_amplitude));
    f.push_back({"noise_basis",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::string t = trim(v);
                   if (t == "dressed") c.params.noise_basis = NoiseBasis::dressed;
                   else if (t == "bare") c.params.noise_basis = NoiseBasis::bare;
                   else throw ConfigError("noise_basis: expected dressed or bare: '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.params.noise_basis == NoiseBasis::dressed ? "dressed" : "bare");
                 },
                 false});
    f.push_back(plain("dt_s", &SimulationParams::dt));
    f.push_back(plain("trace_duration_s", &SimulationParams::trace_duration));
    f.push_back(plain("tau_c_s", &SimulationParams::tau_c));
    f.push_back(plain("density_per_cm3", &SimulationParams::density_per_cm3));
    f.push_back({"wavelength_m",
                 [](ExperimentConfig& c, const std::string& v) {
                   const double l = to_double("wavelength_m", v);
                   if (!(l > 0)) throw ConfigError("wavelength_m: must be > 0");
                   c.params.k0 = kTwoPi / l;
                 },
                 [](const ExperimentConfig& c) { return fmt(kTwoPi / c.params.k0); }});
    f.push_back({"sweep_key", [](ExperimentConfig& c, const std::string& v) { c.sweep_key = trim(v); },
                 [](const ExperimentConfig& c) { return c.sweep_key; }, false});
    f.push_back({"sweep_values",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.sweep_values.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ','))
                     if (!trim(item).empty()) c.sweep_values.push_back(to_double("sweep_values", item));
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.sweep_values.size(); ++i) s += (i ? "," : "") + fmt(c.sweep_values[i]);
                   return s;
                 },
                 false});
    f.push_back({"ensemble",
                 [](ExperimentConfig& c, const std::string& v) { c.ensemble = static_cast<int>(to_int("ensemble", v)); },
                 [](const ExperimentConfig& c) { return std::to_string(c.ensemble); }});
    f.push_back({"master_seed",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::string t = trim(v);
                   std::uint64_t s = 0;
                   const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), s);
                   if (ec != std::errc() || ptr != t.data() + t.size())
                     throw ConfigError("master_seed: not an unsigned integer: '" + v + "'");
                   c.master_seed = s;
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.master_seed); }, false});
    f.push_back({"output_dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = trim(v); },
                 [](const ExperimentConfig& c) { return c.output_dir; }, false});
    f.push_back(cfg_double("r_m", &ExperimentConfig::r_m));
    f.push_back(cfg_double("theta_rad", &ExperimentConfig::theta_rad));
    f.push_back(cfg_double("phi_rad", &ExperimentConfig::phi_rad));
    f.push_back({"isotropic_angles",
                 [](ExperimentConfig& c, const std::string& v) { c.isotropic_angles = to_bool("isotropic_angles", v); },
                 [](const ExperimentConfig& c) { return std::string(c.isotropic_angles ? "true" : "false"); },
                 false});
    f.push_back({"segment_len",
                 [](ExperimentConfig& c, const std::string& v) { c.segment_len = static_cast<int>(to_int("segment_len", v)); },
                 [](const ExperimentConfig& c) { return std::to_string(c.segment_len); }});
    f.push_back({"fit_model",
                 [](ExperimentConfig& c, const std::string& v) {
                   try {
                     c.fit_model = fit_model_from_string(trim(v));
                   } catch (const std::exception&) {
                     throw ConfigError("fit_model: unknown model '" + v + "'");
                   }
                 },
                 [](const ExperimentConfig& c) { return to_string(c.fit_model); }, false});
    f.push_back(cfg_double("f_min_hz", &ExperimentConfig::f_min_hz));
    f.push_back(cfg_double("f_max_hz", &ExperimentConfig::f_max_hz));
    f.push_back(cfg_double("ou_gamma_hz", &ExperimentConfig::ou_gamma_hz));
    f.push_back(cfg_double("ou_duration_s", &ExperimentConfig::ou_duration_s));
    return f;
  }();
  return fields;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : schema())
    if (f.key == key) return &f;
  return nullptr;
}

bool is_sweep_recipe(Recipe r) {
  return r != Recipe::trace_dump && r != Recipe::ou_check;
}

std::string default_sweep_key(Recipe r) {
  switch (r) {
    case Recipe::static_distance_sweep: return "r_m";
    case Recipe::angle_sweep: return "theta_rad";
    case Recipe::density_sweep:
    case Recipe::lf_tail:
    case Recipe::perturbation_check: return "density_per_cm3";
    case Recipe::power_sweep: return "omega_rabi_hz";
    case Recipe::trace_dump:
    case Recipe::ou_check: return "";
  }
  return "";
}

}  // namespace

std::string to_string(Recipe r) {
  switch (r) {
    case Recipe::static_distance_sweep: return "static-distance-sweep";
    case Recipe::angle_sweep: return "angle-sweep";
    case Recipe::density_sweep: return "density-sweep";
    case Recipe::power_sweep: return "power-sweep";
    case Recipe::trace_dump: return "trace-dump";
    case Recipe::lf_tail: return "lf-tail";
    case Recipe::ou_check: return "ou-check";
    case Recipe::perturbation_check: return "perturbation-check";
  }
  return "?";
}

Recipe recipe_from_string(const std::string& s) {
  for (auto r : {Recipe::static_distance_sweep, Recipe::angle_sweep, Recipe::density_sweep, Recipe::power_sweep,
                 Recipe::trace_dump, Recipe::lf_tail, Recipe::ou_check, Recipe::perturbation_check})
    if (to_string(r) == s) return r;
  throw ConfigError("recipe: unknown recipe '" + s + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& f : schema()) k.push_back(f.key);
  return k;
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& f : schema()) out += f.key + "=" + f.get(*this) + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  std::string text;
  for (const auto& f : schema())
    if (f.key != "output_dir") text += f.key + "=" + f.get(*this) + "\n";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  params.validate();
  if (ensemble < 1) throw ConfigError("ensemble: must be >= 1");
  if (segment_len < 16) throw ConfigError("segment_len: must be >= 16");
  if (f_min_hz < 0 || f_max_hz < 0 || (f_max_hz > 0 && f_max_hz <= f_min_hz))
    throw ConfigError("f_max_hz: fit band must satisfy 0 <= f_min_hz < f_max_hz");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  const auto n_samples = static_cast<long long>(std::llround(params.trace_duration / params.dt));
  if (recipe != Recipe::perturbation_check && recipe != Recipe::ou_check && n_samples < segment_len)
    throw ConfigError("segment_len: longer than trace_duration_s / dt_s");
  if (is_sweep_recipe(recipe)) {
    if (sweep_values.empty()) throw ConfigError("sweep_values: required for recipe " + to_string(recipe));
    const Field* f = find_field(sweep_key);
    if (!f || !f->numeric) throw ConfigError("sweep_key: '" + sweep_key + "' is not a numeric config key");
    if (sweep_values.size() > 1) {
      const bool up = sweep_values[1] > sweep_values[0];
      for (std::size_t i = 1; i < sweep_values.size(); ++i)
        if ((sweep_values[i] > sweep_values[i - 1]) != up || sweep_values[i] == sweep_values[i - 1])
          throw ConfigError("sweep_values: must be strictly monotone");
    }
  }
  if (recipe == Recipe::angle_sweep && !(r_m > 0) && sweep_key != "r_m")
    throw ConfigError("r_m: required for recipe angle-sweep");
  if (recipe == Recipe::ou_check && !(ou_gamma_hz > 0)) throw ConfigError("ou_gamma_hz: must be > 0");
  if (r_m < 0) throw ConfigError("r_m: must be >= 0");
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = trim(assignment.substr(0, eq));
  const Field* f = find_field(key);
  if (!f) throw ConfigError(key + ": unknown config key");
  f->set(cfg, assignment.substr(eq + 1));
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const Field* f = find_field(key);
    if (!f) throw ConfigError(key + ": unknown config key (line " + std::to_string(lineno) + ")");
    if (!seen.insert(key).second) throw ConfigError(key + ": given twice");
    f->set(cfg, line.substr(eq + 1));
  }
  if (!seen.count("recipe")) throw ConfigError("recipe: required field missing");
  if (!seen.count("sweep_key")) cfg.sweep_key = default_sweep_key(cfg.recipe);
  if (!seen.count("fit_model")) {
    if (cfg.recipe == Recipe::density_sweep || cfg.recipe == Recipe::power_sweep || cfg.recipe == Recipe::lf_tail)
      cfg.fit_model = FitModel::sinc_lf;
  }
  if (is_sweep_recipe(cfg.recipe) && !seen.count("sweep_values"))
    throw ConfigError("sweep_values: required field missing for recipe " + to_string(cfg.recipe));
  if (cfg.recipe == Recipe::angle_sweep && !seen.count("r_m") && cfg.sweep_key != "r_m")
    throw ConfigError("r_m: required field missing for recipe angle-sweep");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace spinnoise
