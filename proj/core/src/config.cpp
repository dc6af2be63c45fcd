#include "centerseg/config.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "centerseg/error.hpp"

namespace centerseg {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    if (value.empty() || value[0] == '-') throw std::invalid_argument("negative");
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + value + "'");
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config: '" + key + "' " + what);
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = {
      "dataset",     "classes",     "prototypes",   "grid_rows", "grid_cols",    "momentum",
      "alpha",       "tau",         "gumbel_noise", "lambda_pp", "lambda_fp",    "lambda_dice",
      "margin",      "lr",          "weight_decay", "epochs",    "batch_size",   "seed",
      "baseline",    "feature_dim", "hidden",       "downsample"};
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "dataset") {
    dataset = value;
  } else if (key == "classes") {
    classes = parse_u64(key, value);
  } else if (key == "prototypes") {
    prototypes = parse_u64(key, value);
  } else if (key == "grid_rows") {
    grid_rows = parse_u64(key, value);
  } else if (key == "grid_cols") {
    grid_cols = parse_u64(key, value);
  } else if (key == "momentum") {
    momentum = parse_double(key, value);
  } else if (key == "alpha") {
    alpha = parse_double(key, value);
  } else if (key == "tau") {
    tau = parse_double(key, value);
  } else if (key == "gumbel_noise") {
    gumbel_noise = parse_bool(key, value);
  } else if (key == "lambda_pp") {
    lambda_pp = parse_double(key, value);
  } else if (key == "lambda_fp") {
    lambda_fp = parse_double(key, value);
  } else if (key == "lambda_dice") {
    lambda_dice = parse_double(key, value);
  } else if (key == "margin") {
    margin = parse_double(key, value);
  } else if (key == "lr") {
    lr = parse_double(key, value);
  } else if (key == "weight_decay") {
    weight_decay = parse_double(key, value);
  } else if (key == "epochs") {
    epochs = parse_u64(key, value);
  } else if (key == "batch_size") {
    batch_size = parse_u64(key, value);
  } else if (key == "seed") {
    seed = parse_u64(key, value);
  } else if (key == "baseline") {
    baseline = parse_bool(key, value);
  } else if (key == "feature_dim") {
    feature_dim = parse_u64(key, value);
  } else if (key == "hidden") {
    hidden = parse_u64(key, value);
  } else if (key == "downsample") {
    downsample = parse_u64(key, value);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "dataset=" << dataset << "\n"
     << "classes=" << classes << "\n"
     << "prototypes=" << prototypes << "\n"
     << "grid_rows=" << grid_rows << "\n"
     << "grid_cols=" << grid_cols << "\n"
     << "momentum=" << format_double(momentum) << "\n"
     << "alpha=" << format_double(alpha) << "\n"
     << "tau=" << format_double(tau) << "\n"
     << "gumbel_noise=" << b(gumbel_noise) << "\n"
     << "lambda_pp=" << format_double(lambda_pp) << "\n"
     << "lambda_fp=" << format_double(lambda_fp) << "\n"
     << "lambda_dice=" << format_double(lambda_dice) << "\n"
     << "margin=" << format_double(margin) << "\n"
     << "lr=" << format_double(lr) << "\n"
     << "weight_decay=" << format_double(weight_decay) << "\n"
     << "epochs=" << epochs << "\n"
     << "batch_size=" << batch_size << "\n"
     << "seed=" << seed << "\n"
     << "baseline=" << b(baseline) << "\n"
     << "feature_dim=" << feature_dim << "\n"
     << "hidden=" << hidden << "\n"
     << "downsample=" << downsample << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
    }
    c.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

void RunConfig::validate() const {
  require(classes >= 2 && classes <= 254, "classes", "must be in [2, 254]");
  require(prototypes >= 1, "prototypes", "must be at least 1");
  require(grid_rows >= 1, "grid_rows", "must be at least 1");
  require(grid_cols >= 1, "grid_cols", "must be at least 1");
  require(std::isfinite(momentum) && momentum >= 0.0 && momentum < 1.0, "momentum",
          "must be in [0, 1)");
  require(std::isfinite(alpha) && alpha > 0.0, "alpha", "must be positive");
  require(std::isfinite(tau) && tau > 0.0, "tau", "must be positive");
  for (const auto& [key, v] : {std::pair<const char*, double>{"lambda_pp", lambda_pp},
                               {"lambda_fp", lambda_fp},
                               {"lambda_dice", lambda_dice}}) {
    require(std::isfinite(v) && v >= 0.0, key, "must be finite and >= 0");
  }
  require(std::isfinite(margin) && margin > 0.0, "margin", "must be positive");
  require(std::isfinite(lr) && lr > 0.0, "lr", "must be positive");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(batch_size >= 1, "batch_size", "must be at least 1");
  require(feature_dim >= 1, "feature_dim", "must be at least 1");
  require(hidden >= 1, "hidden", "must be at least 1");
  require(downsample == 1 || downsample == 2 || downsample == 4, "downsample",
          "must be 1, 2 or 4");
  require(!baseline || (prototypes == 1 && lambda_pp == 0.0 && lambda_fp == 0.0), "baseline",
          "requires prototypes=1 and lambda_pp=lambda_fp=0 (use effective())");
  if (lambda_pp > 0.0) {
    require(feature_dim >= prototypes, "feature_dim",
            "must be at least prototypes when lambda_pp > 0");
  }
}

RunConfig RunConfig::effective() const {
  RunConfig c = *this;
  if (c.baseline) {
    c.prototypes = 1;
    c.lambda_pp = 0.0;
    c.lambda_fp = 0.0;
  }
  return c;
}

BackboneConfig RunConfig::backbone() const {
  BackboneConfig b;
  b.in_channels = 3;
  b.hidden_channels = hidden;
  b.feature_dim = feature_dim;
  b.downsample = downsample;
  return b;
}

LossWeights RunConfig::loss_weights() const {
  LossWeights w;
  w.pp = lambda_pp;
  w.fp = lambda_fp;
  w.dice = lambda_dice;
  w.margin = margin;
  return w;
}

AssignmentOptions RunConfig::assignment() const {
  AssignmentOptions a;
  a.temperature = tau;
  a.gumbel_noise = gumbel_noise;
  a.straight_through = true;
  return a;
}

}  // namespace centerseg
