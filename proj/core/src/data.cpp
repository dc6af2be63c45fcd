#include "centerseg/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "centerseg/error.hpp"
#include "centerseg/random.hpp"

namespace centerseg {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestFormat = "centerseg-dataset";
constexpr int kManifestVersion = 1;

std::uint64_t split_id(const std::string& split) {
  for (std::size_t i = 0; i < kSplits.size(); ++i) {
    if (kSplits[i] == split) return i;
  }
  throw ContractError("unknown split '" + split + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void DatasetSpec::validate() const {
  if (classes < 2) throw ConfigError("dataset needs at least 2 classes");
  if (classes > 254) throw ConfigError("dataset supports at most 254 classes");
  if (modes_per_class < 1) throw ConfigError("modes_per_class must be at least 1");
  if (size_multiple < 1) throw ConfigError("size_multiple must be at least 1");
  if (height == 0 || width == 0 || height % size_multiple != 0 || width % size_multiple != 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not a positive multiple of " + std::to_string(size_multiple));
  }
  if (!std::isfinite(noise) || noise < 0.0) throw ConfigError("noise must be finite and >= 0");
}

std::size_t DatasetSpec::count(const std::string& split) const {
  switch (split_id(split)) {
    case 0:
      return train;
    case 1:
      return val;
    default:
      return test;
  }
}

double ModeSignature::value(std::size_t c, std::size_t y, std::size_t x) const {
  const std::size_t half = std::max<std::size_t>(1, period / 2);
  double sign = 0.0;
  switch (texture) {
    case Texture::flat:
      break;
    case Texture::stripes:
      sign = ((vertical ? x : y) / half) % 2 == 0 ? 1.0 : -1.0;
      break;
    case Texture::checker:
      sign = (y / half + x / half) % 2 == 0 ? 1.0 : -1.0;
      break;
  }
  return color[c] + amplitude * sign;
}

std::vector<ModeSignature> make_mode_signatures(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(Rng::derive(spec.seed, {1}));
  const std::size_t total = spec.classes * spec.modes_per_class;
  std::vector<ModeSignature> out;
  out.reserve(total);
  double min_gap = 0.3;
  int failures = 0;
  while (out.size() < total) {
    ModeSignature sig;
    sig.cls = out.size() / spec.modes_per_class;
    sig.mode = out.size() % spec.modes_per_class;
    for (auto& ch : sig.color) ch = rng.uniform(0.15, 0.85);
    bool far = true;
    for (const auto& other : out) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) d2 += std::pow(sig.color[c] - other.color[c], 2);
      if (d2 < min_gap * min_gap) {
        far = false;
        break;
      }
    }
    if (!far) {
      if (++failures == 200) {
        min_gap *= 0.9;
        failures = 0;
      }
      continue;
    }
    sig.texture = static_cast<Texture>(sig.mode % 3);
    sig.period = 4 + rng.uniform_index(5);
    sig.vertical = (rng.next_u64() & 1) != 0;
    sig.amplitude = sig.texture == Texture::flat ? 0.0 : 0.12;
    out.push_back(sig);
  }
  return out;
}

RegionLayout region_layout(const DatasetSpec& spec, const std::string& split, std::size_t index) {
  Rng rng(Rng::derive(spec.seed, {2, split_id(split), index}));
  RegionLayout out;
  const std::size_t n = 6 + rng.uniform_index(15);
  for (std::size_t i = 0; i < n; ++i) {
    const double y = rng.uniform(0.0, static_cast<double>(spec.height));
    const double x = rng.uniform(0.0, static_cast<double>(spec.width));
    out.seeds.push_back({y, x});
    out.region_class.push_back(rng.uniform_index(spec.classes));
    out.region_mode.push_back(rng.uniform_index(spec.modes_per_class));
  }
  out.region.resize(spec.height * spec.width);
  for (std::size_t y = 0; y < spec.height; ++y) {
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double py = static_cast<double>(y) + 0.5;
      const double px = static_cast<double>(x) + 0.5;
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t best_i = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dy = py - out.seeds[i][0];
        const double dx = px - out.seeds[i][1];
        const double d2 = dy * dy + dx * dx;
        if (d2 < best) {
          best = d2;
          best_i = static_cast<std::uint32_t>(i);
        }
      }
      out.region[y * spec.width + x] = best_i;
    }
  }
  return out;
}

Sample render_sample(const DatasetSpec& spec, const std::vector<ModeSignature>& modes,
                     const std::string& split, std::size_t index) {
  const RegionLayout layout = region_layout(spec, split, index);
  Rng noise(Rng::derive(spec.seed, {3, split_id(split), index}));
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;
  RgbImage rgb{h, w, std::vector<std::uint8_t>(h * w * 3)};
  LabelMap labels(h, w);
  const auto b = static_cast<std::ptrdiff_t>(spec.ignore_border);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint32_t r = layout.region[y * w + x];
      const std::size_t cls = layout.region_class[r];
      const ModeSignature& sig = modes[cls * spec.modes_per_class + layout.region_mode[r]];
      for (std::size_t c = 0; c < 3; ++c) {
        rgb.rgb[(y * w + x) * 3 + c] = quantize(sig.value(c, y, x) + spec.noise * noise.normal());
      }
      bool border = false;
      for (std::ptrdiff_t dy = -b; dy <= b && !border; ++dy) {
        for (std::ptrdiff_t dx = -b; dx <= b; ++dx) {
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
          const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
              xx >= static_cast<std::ptrdiff_t>(w)) {
            continue;
          }
          if (layout.region[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] != r) {
            border = true;
            break;
          }
        }
      }
      labels.at(y, x) = border ? kIgnoreIndex : static_cast<std::uint8_t>(cls);
    }
  }
  return {from_rgb(rgb), labels};
}

const std::vector<SampleFiles>& Manifest::files(const std::string& split) const {
  switch (split_id(split)) {
    case 0:
      return train;
    case 1:
      return val;
    default:
      return test;
  }
}

std::string manifest_text(const Manifest& m) {
  const DatasetSpec& s = m.spec;
  std::ostringstream os;
  os << "format=" << kManifestFormat << "\n";
  os << "version=" << kManifestVersion << "\n";
  os << "classes=" << s.classes << "\n";
  os << "modes_per_class=" << s.modes_per_class << "\n";
  os << "height=" << s.height << "\n";
  os << "width=" << s.width << "\n";
  os << "train=" << s.train << "\n";
  os << "val=" << s.val << "\n";
  os << "test=" << s.test << "\n";
  os << "noise=" << format_double(s.noise) << "\n";
  os << "ignore_border=" << s.ignore_border << "\n";
  os << "size_multiple=" << s.size_multiple << "\n";
  os << "seed=" << s.seed << "\n";
  os << "ignore_index=" << static_cast<int>(kIgnoreIndex) << "\n";
  for (const auto& sig : m.modes) {
    os << "mode=" << sig.cls << " " << sig.mode;
    for (double c : sig.color) os << " " << format_double(c);
    os << " " << static_cast<int>(sig.texture) << " " << sig.period << " " << (sig.vertical ? 1 : 0)
       << " " << format_double(sig.amplitude) << "\n";
  }
  for (const auto& split : kSplits) {
    for (const auto& f : m.files(split)) {
      os << "sample=" << split << " " << f.image << " " << f.labels << "\n";
    }
  }
  return os.str();
}

Manifest generate_dataset(const DatasetSpec& spec, const fs::path& out) {
  spec.validate();
  Manifest m;
  m.root = out;
  m.spec = spec;
  m.modes = make_mode_signatures(spec);
  try {
    for (const auto& split : kSplits) fs::create_directories(out / split);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create dataset directory " + out.string() + ": " + e.what());
  }
  for (const auto& split : kSplits) {
    auto& list = split == "train" ? m.train : split == "val" ? m.val : m.test;
    for (std::size_t i = 0; i < spec.count(split); ++i) {
      SampleFiles f{split + "/img_" + std::to_string(i) + ".ppm",
                    split + "/lbl_" + std::to_string(i) + ".pgm"};
      const Sample s = render_sample(spec, m.modes, split, i);
      write_file(out / f.image, encode_ppm(to_rgb(s.image)));
      write_file(out / f.labels, encode_pgm(s.labels));
      list.push_back(f);
    }
  }
  const std::string text = manifest_text(m);
  write_file(out / "manifest.txt", std::vector<std::uint8_t>(text.begin(), text.end()));
  return m;
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("manifest: bad integer for '" + key + "': " + value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError("manifest: bad number for '" + key + "': " + value);
  }
}

}  // namespace

Manifest load_manifest(const fs::path& root) {
  const auto bytes = read_file(root / "manifest.txt");
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  Manifest m;
  m.root = root;
  std::string line;
  bool format_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("manifest: malformed line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    DatasetSpec& s = m.spec;
    if (key == "format") {
      if (value != kManifestFormat) throw DataError("manifest: unknown format " + value);
      format_seen = true;
    } else if (key == "version") {
      if (parse_size(key, value) != kManifestVersion) {
        throw DataError("manifest: unsupported version " + value);
      }
    } else if (key == "classes") {
      s.classes = parse_size(key, value);
    } else if (key == "modes_per_class") {
      s.modes_per_class = parse_size(key, value);
    } else if (key == "height") {
      s.height = parse_size(key, value);
    } else if (key == "width") {
      s.width = parse_size(key, value);
    } else if (key == "train") {
      s.train = parse_size(key, value);
    } else if (key == "val") {
      s.val = parse_size(key, value);
    } else if (key == "test") {
      s.test = parse_size(key, value);
    } else if (key == "noise") {
      s.noise = parse_double(key, value);
    } else if (key == "ignore_border") {
      s.ignore_border = parse_size(key, value);
    } else if (key == "size_multiple") {
      s.size_multiple = parse_size(key, value);
    } else if (key == "seed") {
      s.seed = parse_size(key, value);
    } else if (key == "ignore_index") {
      if (parse_size(key, value) != kIgnoreIndex) throw DataError("manifest: ignore_index must be 255");
    } else if (key == "mode") {
      std::istringstream fields(value);
      ModeSignature sig;
      int texture = 0;
      int vertical = 0;
      if (!(fields >> sig.cls >> sig.mode >> sig.color[0] >> sig.color[1] >> sig.color[2] >>
            texture >> sig.period >> vertical >> sig.amplitude) ||
          texture < 0 || texture > 2) {
        throw DataError("manifest: malformed mode line: " + value);
      }
      sig.texture = static_cast<Texture>(texture);
      sig.vertical = vertical != 0;
      m.modes.push_back(sig);
    } else if (key == "sample") {
      std::istringstream fields(value);
      std::string split;
      SampleFiles f;
      if (!(fields >> split >> f.image >> f.labels)) {
        throw DataError("manifest: malformed sample line: " + value);
      }
      if (split == "train") {
        m.train.push_back(f);
      } else if (split == "val") {
        m.val.push_back(f);
      } else if (split == "test") {
        m.test.push_back(f);
      } else {
        throw DataError("manifest: unknown split " + split);
      }
    } else {
      throw DataError("manifest: unknown key " + key);
    }
  }
  if (!format_seen) throw DataError("manifest: missing format line in " + root.string());
  try {
    m.spec.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (m.train.size() != m.spec.train || m.val.size() != m.spec.val ||
      m.test.size() != m.spec.test) {
    throw DataError("manifest: sample lists do not match the split sizes");
  }
  if (m.modes.size() != m.spec.classes * m.spec.modes_per_class) {
    throw DataError("manifest: expected " +
                    std::to_string(m.spec.classes * m.spec.modes_per_class) + " mode lines");
  }
  return m;
}

Sample load_sample(const Manifest& manifest, const std::string& split, std::size_t index) {
  const auto& list = manifest.files(split);
  if (index >= list.size()) {
    throw ContractError("sample index " + std::to_string(index) + " out of range for split " +
                        split + " (" + std::to_string(list.size()) + " samples)");
  }
  const RgbImage rgb = decode_ppm(read_file(manifest.root / list[index].image));
  LabelMap labels = decode_pgm(read_file(manifest.root / list[index].labels));
  const DatasetSpec& s = manifest.spec;
  if (rgb.height != s.height || rgb.width != s.width || labels.height != s.height ||
      labels.width != s.width) {
    throw DataError("sample " + split + "/" + std::to_string(index) + " has the wrong size");
  }
  for (std::uint8_t v : labels.values) {
    if (v >= s.classes && v != kIgnoreIndex) {
      throw DataError("label " + std::to_string(v) + " out of range in " + list[index].labels);
    }
  }
  return {from_rgb(rgb), std::move(labels)};
}

RgbImage to_rgb(const Image& image) {
  if (image.channels != 3) throw DimensionError("to_rgb: expected 3 channels");
  const std::size_t n = image.height * image.width;
  RgbImage out{image.height, image.width, std::vector<std::uint8_t>(n * 3)};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < n; ++p) out.rgb[p * 3 + c] = quantize(image.pixels[c * n + p]);
  }
  return out;
}

Image from_rgb(const RgbImage& rgb) {
  const std::size_t n = rgb.height * rgb.width;
  Image out{3, rgb.height, rgb.width, std::vector<float>(n * 3)};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < n; ++p) {
      out.pixels[c * n + p] = static_cast<float>(rgb.rgb[p * 3 + c]) / 255.0f;
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> encode_netpbm(const char* magic, std::size_t w, std::size_t h,
                                        const std::vector<std::uint8_t>& body) {
  const std::string header =
      std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

struct Netpbm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t offset = 0;
};

Netpbm parse_netpbm_header(const std::vector<std::uint8_t>& bytes, const char* magic) {
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
      t.push_back(static_cast<char>(bytes[pos++]));
    }
    return t;
  };
  auto number = [&] {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), ::isdigit) || t.size() > 9) {
      throw IoError(std::string("corrupt ") + magic + " header");
    }
    return static_cast<std::size_t>(std::stoul(t));
  };
  if (token() != magic) throw IoError(std::string("not a ") + magic + " file");
  Netpbm out;
  out.width = number();
  out.height = number();
  if (number() != 255) throw IoError(std::string(magic) + ": only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw IoError(std::string("corrupt ") + magic + " header");
  }
  out.offset = pos + 1;
  if (out.width == 0 || out.height == 0) throw IoError(std::string(magic) + ": empty image");
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  return encode_netpbm("P6", image.width, image.height, image.rgb);
}

std::vector<std::uint8_t> encode_pgm(const LabelMap& labels) {
  return encode_netpbm("P5", labels.width, labels.height, labels.values);
}

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  const Netpbm h = parse_netpbm_header(bytes, "P6");
  const std::size_t n = h.width * h.height * 3;
  if (bytes.size() - h.offset != n) throw IoError("P6: pixel data has the wrong length");
  return {h.height, h.width,
          std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(h.offset),
                                    bytes.end())};
}

LabelMap decode_pgm(const std::vector<std::uint8_t>& bytes) {
  const Netpbm h = parse_netpbm_header(bytes, "P5");
  if (bytes.size() - h.offset != h.width * h.height) {
    throw IoError("P5: pixel data has the wrong length");
  }
  LabelMap out(h.height, h.width);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(h.offset), bytes.end(),
            out.values.begin());
  return out;
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

Palette default_palette() {
  return {{{230, 25, 75}},   {{60, 180, 75}},   {{255, 225, 25}}, {{0, 130, 200}},
          {{245, 130, 48}},  {{145, 30, 180}},  {{70, 240, 240}}, {{240, 50, 230}},
          {{210, 245, 60}},  {{250, 190, 212}}, {{0, 128, 128}},  {{170, 110, 40}}};
}

RgbImage render_prediction(const LabelMap& labels, const Palette& palette,
                           std::size_t num_classes) {
  if (palette.size() < num_classes) {
    throw ConfigError("palette has " + std::to_string(palette.size()) + " colors for " +
                      std::to_string(num_classes) + " classes");
  }
  RgbImage out{labels.height, labels.width, std::vector<std::uint8_t>(labels.size() * 3, 0)};
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const std::uint8_t v = labels.values[p];
    if (v == kIgnoreIndex) continue;
    if (v >= num_classes) throw DataError("render_prediction: label out of range");
    std::copy(palette[v].begin(), palette[v].end(), out.rgb.begin() + static_cast<std::ptrdiff_t>(p * 3));
  }
  return out;
}

}  // namespace centerseg
