#include "contrec/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "contrec/common.hpp"

namespace contrec {

namespace {

double to_double(const std::string& v, const std::string& key) {
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": " + v);
  }
}

int to_int(const std::string& v, const std::string& key) {
  try {
    return std::stoi(v);
  } catch (const std::exception&) {
    throw ConfigError("bad integer value for " + key + ": " + v);
  }
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean value for " + key + ": " + v);
}

bool in_grid(double v, std::initializer_list<double> grid) {
  for (double g : grid)
    if (std::abs(v - g) < 1e-12) return true;
  return false;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "interactions") interactions = value;
  else if (key == "catalog") catalog = value;
  else if (key == "external_embeddings") external_embeddings = value;
  else if (key == "workdir") workdir = value;
  else if (key == "seed") seed = to_int(value, key);
  else if (key == "D") D = to_int(value, key);
  else if (key == "D_z") D_z = to_int(value, key);
  else if (key == "D_c") D_c = to_int(value, key);
  else if (key == "E") E = to_int(value, key);
  else if (key == "layers") layers = to_int(value, key);
  else if (key == "hidden") hidden = to_int(value, key);
  else if (key == "denoiser_E") denoiser_E = to_int(value, key);
  else if (key == "denoiser_H") denoiser_H = to_int(value, key);
  else if (key == "K") K = to_int(value, key);
  else if (key == "rho") rho = to_double(value, key);
  else if (key == "beta") beta = to_double(value, key);
  else if (key == "gamma_floor") gamma_floor = to_double(value, key);
  else if (key == "T") T = to_int(value, key);
  else if (key == "inference_steps") inference_steps = to_int(value, key);
  else if (key == "beta_start") beta_start = to_double(value, key);
  else if (key == "beta_end") beta_end = to_double(value, key);
  else if (key == "zeta") zeta = to_double(value, key);
  else if (key == "iota") iota = to_double(value, key);
  else if (key == "omega") omega = to_double(value, key);
  else if (key == "gamma1") gamma1 = to_double(value, key);
  else if (key == "gamma2") gamma2 = to_double(value, key);
  else if (key == "pi_val") pi_val = to_double(value, key);
  else if (key == "pi_use_brand") pi_use_brand = to_bool(value, key);
  else if (key == "lr_backbone") lr_backbone = to_double(value, key);
  else if (key == "wd_backbone") wd_backbone = to_double(value, key);
  else if (key == "lr_tokenizer") lr_tokenizer = to_double(value, key);
  else if (key == "wd_tokenizer") wd_tokenizer = to_double(value, key);
  else if (key == "batch_size") batch_size = to_int(value, key);
  else if (key == "epochs_tokenizer") epochs_tokenizer = to_int(value, key);
  else if (key == "epochs_rec") epochs_rec = to_int(value, key);
  else if (key == "max_len") max_len = to_int(value, key);
  else if (key == "q1") q1 = to_double(value, key);
  else if (key == "q2") q2 = to_double(value, key);
  else if (key == "eval_seeds") eval_seeds = to_int(value, key);
  else if (key == "valid_subsample") valid_subsample = to_int(value, key);
  else if (key == "ablation") ablation = value;
  else throw ConfigError("unknown config key: " + key);
}

void RunConfig::validate() const {
  if (K < 1 || K > 5) throw ConfigError("K must be in {1..5}");
  if (rho < 0.0 || rho > 1.0) throw ConfigError("rho must be in [0,1]");
  if (!in_grid(gamma1, {0.0, 0.5, 1.0, 1.5, 2.0}))
    throw ConfigError("gamma1 must be in {0, 0.5, 1.0, 1.5, 2.0}");
  if (!in_grid(gamma2, {0.0, 0.5, 1.0, 1.5, 2.0}))
    throw ConfigError("gamma2 must be in {0, 0.5, 1.0, 1.5, 2.0}");
  if (omega < 0.0) throw ConfigError("omega must be >= 0");
  if (zeta < 0.0 || zeta > 1.0) throw ConfigError("zeta must be in [0,1]");
  if (!(0.0 < q1 && q1 < q2 && q2 < 1.0)) throw ConfigError("need 0 < q1 < q2 < 1");
  if (inference_steps > T) throw ConfigError("inference_steps must be <= T");
  if (ablation != "none" && ablation != "no_diffusion" && ablation != "no_disp")
    throw ConfigError("ablation must be none | no_diffusion | no_disp");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::string RunConfig::canonical() const {
  std::ostringstream ss;
  ss.precision(17);
  ss << "interactions=" << interactions << "\ncatalog=" << catalog
     << "\nexternal_embeddings=" << external_embeddings << "\nworkdir=" << workdir
     << "\nseed=" << seed << "\nD=" << D << "\nD_z=" << D_z << "\nD_c=" << D_c
     << "\nE=" << E << "\nlayers=" << layers << "\nhidden=" << hidden
     << "\ndenoiser_E=" << denoiser_E << "\ndenoiser_H=" << denoiser_H << "\nK=" << K
     << "\nrho=" << rho << "\nbeta=" << beta << "\ngamma_floor=" << gamma_floor
     << "\nT=" << T << "\ninference_steps=" << inference_steps
     << "\nbeta_start=" << beta_start << "\nbeta_end=" << beta_end
     << "\nzeta=" << zeta << "\niota=" << iota << "\nomega=" << omega
     << "\ngamma1=" << gamma1 << "\ngamma2=" << gamma2 << "\npi_val=" << pi_val
     << "\npi_use_brand=" << pi_use_brand << "\nlr_backbone=" << lr_backbone
     << "\nwd_backbone=" << wd_backbone << "\nlr_tokenizer=" << lr_tokenizer
     << "\nwd_tokenizer=" << wd_tokenizer << "\nbatch_size=" << batch_size
     << "\nepochs_tokenizer=" << epochs_tokenizer << "\nepochs_rec=" << epochs_rec
     << "\nmax_len=" << max_len << "\nq1=" << q1 << "\nq2=" << q2
     << "\neval_seeds=" << eval_seeds << "\nvalid_subsample=" << valid_subsample
     << "\nablation=" << ablation << "\n";
  return ss.str();
}

std::uint64_t RunConfig::hash() const {
  // FNV-1a over the canonical text
  std::uint64_t h = 1469598103934665603ull;
  for (char c : canonical()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& kvs) {
  for (const auto& kv : kvs) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override must be key=value: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

}  // namespace contrec
