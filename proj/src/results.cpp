#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

#include "spinnoise/harness.hpp"

namespace spinnoise {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << std::setprecision(17);
  return f;
}

json fit_to_json(const FitResult& f) {
  json j;
  j["model"] = to_string(f.model);
  j["peaks"] = json::array();
  for (const auto& p : f.peaks)
    j["peaks"].push_back({{"amplitude", p.amplitude},
                          {"gamma_rad_s", p.gamma},
                          {"omega_l_rad_s", p.omega_l},
                          {"amplitude_err", p.amplitude_err},
                          {"gamma_err_rad_s", p.gamma_err},
                          {"omega_l_err_rad_s", p.omega_l_err}});
  j["lf"] = {{"present", f.lf.present},         {"sinc", f.lf.sinc},
             {"amplitude", f.lf.amplitude},     {"amplitude_err", f.lf.amplitude_err},
             {"gamma_c_rad_s", f.lf.gamma_c},   {"gamma_c_err_rad_s", f.lf.gamma_c_err},
             {"tau_c_s", f.lf.tau_c},           {"tau_c_err_s", f.lf.tau_c_err}};
  j["residual_norm"] = f.residual_norm;
  j["reduced_chi2"] = f.reduced_chi2;
  j["converged"] = f.converged;
  j["message"] = f.message;
  j["sample_rate_hz"] = f.sample_rate;
  return j;
}

FitResult fit_from_json(const json& j) {
  FitResult f;
  f.model = fit_model_from_string(j.at("model").get<std::string>());
  for (const auto& p : j.at("peaks")) {
    PeakParams pk;
    pk.amplitude = p.at("amplitude");
    pk.gamma = p.at("gamma_rad_s");
    pk.omega_l = p.at("omega_l_rad_s");
    pk.amplitude_err = p.at("amplitude_err");
    pk.gamma_err = p.at("gamma_err_rad_s");
    pk.omega_l_err = p.at("omega_l_err_rad_s");
    f.peaks.push_back(pk);
  }
  const auto& lf = j.at("lf");
  f.lf.present = lf.at("present");
  f.lf.sinc = lf.at("sinc");
  f.lf.amplitude = lf.at("amplitude");
  f.lf.amplitude_err = lf.at("amplitude_err");
  f.lf.gamma_c = lf.at("gamma_c_rad_s");
  f.lf.gamma_c_err = lf.at("gamma_c_err_rad_s");
  f.lf.tau_c = lf.at("tau_c_s");
  f.lf.tau_c_err = lf.at("tau_c_err_s");
  f.residual_norm = j.at("residual_norm");
  f.reduced_chi2 = j.at("reduced_chi2");
  f.converged = j.at("converged");
  f.message = j.at("message");
  f.sample_rate = j.value("sample_rate_hz", 0.0);
  return f;
}

json hygiene_to_json(const HygieneReport& h) {
  return {{"max_trace_error", h.max_trace_error},
          {"max_hermiticity_defect", h.max_hermiticity_defect},
          {"min_eigenvalue", h.min_eigenvalue},
          {"negative_eigenvalue_events", h.negative_eigenvalue_events},
          {"checks", h.checks}};
}

HygieneReport hygiene_from_json(const json& j) {
  HygieneReport h;
  h.max_trace_error = j.at("max_trace_error");
  h.max_hermiticity_defect = j.at("max_hermiticity_defect");
  h.min_eigenvalue = j.at("min_eigenvalue");
  h.negative_eigenvalue_events = j.at("negative_eigenvalue_events");
  h.checks = j.at("checks");
  return h;
}

std::string point_file(const char* stem, std::size_t i, const char* suffix = ".csv") {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu%s", stem, i, suffix);
  return buf;
}

}  // namespace

void write_spectrum_csv(const Spectrum& s, std::uint64_t seed, const fs::path& path) {
  auto f = open_out(path);
  f << "# resolution_hz=" << s.resolution << "\n";
  f << "# n_averages=" << s.n_averages << "\n";
  f << "# sample_rate_hz=" << s.sample_rate << "\n";
  f << "# seed=" << seed << "\n";
  f << "freq_hz,psd\n";
  for (std::size_t k = 0; k < s.freqs.size(); ++k) f << s.freqs[k] << "," << s.psd[k] << "\n";
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Spectrum read_spectrum_csv(const fs::path& path, std::uint64_t* seed) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  Spectrum s;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
      if (key == "resolution_hz") s.resolution = std::stod(val);
      else if (key == "n_averages") s.n_averages = std::stoull(val);
      else if (key == "sample_rate_hz") s.sample_rate = std::stod(val);
      else if (key == "seed" && seed) *seed = std::stoull(val);
      continue;
    }
    if (line.rfind("freq_hz", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed row in " + path.string());
    s.freqs.push_back(std::stod(line.substr(0, comma)));
    s.psd.push_back(std::stod(line.substr(comma + 1)));
  }
  return s;
}

void write_trace_csv(const TimeTrace& t, const fs::path& path, const fs::path& events_path) {
  auto f = open_out(path);
  f << "# seed=" << t.seed << "\n";
  f << "t_s,sz\n";
  for (std::size_t i = 0; i < t.samples.size(); ++i) f << static_cast<double>(i) * t.dt << "," << t.samples[i] << "\n";
  auto e = open_out(events_path);
  e << "t_s,r_m,theta_rad,phi_rad\n";
  for (const auto& ev : t.conformation_log)
    e << ev.time << "," << ev.conformation.r << "," << ev.conformation.theta << "," << ev.conformation.phi << "\n";
  if (!f || !e) throw std::runtime_error("write failed: " + path.string());
}

void write_results(const ResultSet& rs, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  json j;
  j["recipe"] = rs.recipe;
  j["sweep_key"] = rs.sweep_key;
  j["config_hash"] = rs.config_hash;
  j["code_version"] = rs.code_version;
  j["master_seed"] = rs.master_seed;
  j["config"] = rs.config;
  j["total_seconds"] = rs.total_seconds;
  j["points"] = json::array();
  for (std::size_t i = 0; i < rs.points.size(); ++i) {
    const auto& p = rs.points[i];
    json jp;
    jp["sweep_value"] = p.sweep_value;
    jp["seed"] = p.seed;
    jp["fit"] = fit_to_json(p.fit);
    if (p.splitting_fit) jp["secondary_fit"] = fit_to_json(*p.splitting_fit);
    jp["scalars"] = p.scalars;
    jp["hygiene"] = hygiene_to_json(p.hygiene);
    jp["seconds"] = p.seconds;
    jp["error"] = p.error;
    if (!p.spectrum.freqs.empty()) {
      const std::string name = point_file("spectrum", i);
      write_spectrum_csv(p.spectrum, p.seed, dir / name);
      jp["spectrum_file"] = name;
    }
    jp["trace_files"] = json::array();
    for (std::size_t t = 0; t < p.traces.size(); ++t) {
      const std::string stem = point_file("trace", i, "") + "_" + std::to_string(t);
      write_trace_csv(p.traces[t], dir / (stem + ".csv"), dir / (stem + "_events.csv"));
      jp["trace_files"].push_back(stem + ".csv");
    }
    j["points"].push_back(jp);
  }
  auto f = open_out(dir / "results.json");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + (dir / "results.json").string());
}

ResultSet read_results(const fs::path& dir) {
  std::ifstream f(dir / "results.json");
  if (!f) throw std::runtime_error("cannot read " + (dir / "results.json").string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error((dir / "results.json").string() + ": " + e.what());
  }
  ResultSet rs;
  rs.recipe = j.at("recipe");
  rs.sweep_key = j.at("sweep_key");
  rs.config_hash = j.at("config_hash");
  rs.code_version = j.at("code_version");
  rs.master_seed = j.at("master_seed");
  rs.config = j.at("config").get<std::map<std::string, std::string>>();
  rs.total_seconds = j.at("total_seconds");
  for (const auto& jp : j.at("points")) {
    PointResult p;
    p.sweep_value = jp.at("sweep_value");
    p.seed = jp.at("seed");
    p.fit = fit_from_json(jp.at("fit"));
    if (jp.contains("secondary_fit")) p.splitting_fit = fit_from_json(jp.at("secondary_fit"));
    p.scalars = jp.at("scalars").get<std::map<std::string, double>>();
    p.hygiene = hygiene_from_json(jp.at("hygiene"));
    p.seconds = jp.at("seconds");
    p.error = jp.at("error");
    if (jp.contains("spectrum_file")) p.spectrum = read_spectrum_csv(dir / jp.at("spectrum_file").get<std::string>());
    rs.points.push_back(std::move(p));
  }
  return rs;
}

std::vector<fs::path> write_report(const fs::path& dir) {
  const ResultSet rs = read_results(dir);
  const std::string x = rs.sweep_key.empty() ? "point" : rs.sweep_key;
  std::set<std::string> keys;
  for (const auto& p : rs.points)
    for (const auto& [k, v] : p.scalars) keys.insert(k);
  std::vector<fs::path> written;
  {
    const fs::path path = dir / "report.csv";
    auto f = open_out(path);
    f << x;
    for (const auto& k : keys) f << "," << k;
    f << "\n";
    for (const auto& p : rs.points) {
      f << p.sweep_value;
      for (const auto& k : keys) {
        f << ",";
        if (auto it = p.scalars.find(k); it != p.scalars.end()) f << it->second;
      }
      f << "\n";
    }
    written.push_back(path);
  }
  for (const auto& k : keys) {
    const fs::path path = dir / ("report_" + k + ".csv");
    auto f = open_out(path);
    f << x << "," << k << "\n";
    for (const auto& p : rs.points)
      if (auto it = p.scalars.find(k); it != p.scalars.end()) f << p.sweep_value << "," << it->second << "\n";
    written.push_back(path);
  }
  return written;
}

}  // namespace spinnoise
