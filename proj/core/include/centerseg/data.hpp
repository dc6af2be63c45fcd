#pragma once

// Synthetic multimode segmentation data. Images are Voronoi mosaics whose
// regions carry a class and a latent appearance mode; several modes per class
// give the large within-class appearance variance prototypes are meant for.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "centerseg/types.hpp"

namespace centerseg {

enum class Texture { flat = 0, stripes = 1, checker = 2 };

struct DatasetSpec {
  std::size_t classes = 4;
  std::size_t modes_per_class = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t train = 200;
  std::size_t val = 50;
  std::size_t test = 50;
  double noise = 0.05;             // Gaussian pixel noise sigma, before 8-bit quantization
  std::size_t ignore_border = 0;   // pixels this close to a region boundary get the ignore label
  std::size_t size_multiple = 4;   // height and width must be multiples of this
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t count(const std::string& split) const;
};

struct ModeSignature {
  std::size_t cls = 0;
  std::size_t mode = 0;
  std::array<double, 3> color{};
  Texture texture = Texture::flat;
  std::size_t period = 4;   // texture period in pixels
  bool vertical = false;    // stripe orientation
  double amplitude = 0.0;   // texture contrast added to every channel

  // Noise-free value of channel c at pixel (y, x).
  double value(std::size_t c, std::size_t y, std::size_t x) const;
};

// K * modes_per_class signatures in (class, mode) order, derived from the seed.
std::vector<ModeSignature> make_mode_signatures(const DatasetSpec& spec);

struct RegionLayout {
  std::vector<std::array<double, 2>> seeds;  // (y, x)
  std::vector<std::size_t> region_class;
  std::vector<std::size_t> region_mode;
  std::vector<std::uint32_t> region;         // [H * W], index of the nearest seed
};

inline const std::vector<std::string> kSplits = {"train", "val", "test"};

// Regions of one sample; regenerating them from the stored seed lets the
// labels be checked independently of the rendered files.
RegionLayout region_layout(const DatasetSpec& spec, const std::string& split, std::size_t index);

struct Sample {
  Image image;  // values are multiples of 1/255
  LabelMap labels;
};

Sample render_sample(const DatasetSpec& spec, const std::vector<ModeSignature>& modes,
                     const std::string& split, std::size_t index);

struct SampleFiles {
  std::string image;   // relative to the dataset root
  std::string labels;
};

struct Manifest {
  std::filesystem::path root;
  DatasetSpec spec;
  std::vector<ModeSignature> modes;
  std::vector<SampleFiles> train;
  std::vector<SampleFiles> val;
  std::vector<SampleFiles> test;

  const std::vector<SampleFiles>& files(const std::string& split) const;
};

// Writes <out>/manifest.txt and <out>/<split>/{img,lbl}_<n>.{ppm,pgm}.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out);

Manifest load_manifest(const std::filesystem::path& root);

// Throws ContractError for an index out of range, IoError for missing or
// corrupt files and DataError for labels outside [0, K) and not ignore.
Sample load_sample(const Manifest& manifest, const std::string& split, std::size_t index);

std::string manifest_text(const Manifest& manifest);

// 8-bit interleaved RGB image.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  bool operator==(const RgbImage&) const = default;
};

RgbImage to_rgb(const Image& image);
Image from_rgb(const RgbImage& rgb);

std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
std::vector<std::uint8_t> encode_pgm(const LabelMap& labels);
RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes);
LabelMap decode_pgm(const std::vector<std::uint8_t>& bytes);

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

using Palette = std::vector<std::array<std::uint8_t, 3>>;

// Distinct colors for up to 12 classes.
Palette default_palette();

// One palette color per pixel; ConfigError when the palette has fewer than
// num_classes entries, DataError for labels outside [0, num_classes) that are
// not the ignore index (drawn black).
RgbImage render_prediction(const LabelMap& labels, const Palette& palette,
                           std::size_t num_classes);

}  // namespace centerseg
