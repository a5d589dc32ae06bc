#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "wsseg/postprocess.hpp"
#include "wsseg/training.hpp"

namespace wsseg {

/// Matches a bracketed 0/1 vector such as "[1 0 0 1]" anywhere in a file name.
inline constexpr const char* kDefaultLabelPattern = R"(\[([01](?:[ ,]+[01])*)\])";

struct SampleRecord {
  std::string image_path;
  std::vector<double> label;              // empty when the file name carries none
  std::optional<std::string> mask_path;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::map<std::string, std::vector<size_t>> splits;  // "train", "val", "test"
  int64_t num_classes = 0;
  std::string label_pattern;
  std::map<std::string, int64_t> skipped;  // per split, files whose name had no usable label

  /// Canonical JSON text; identical trees give identical bytes.
  std::string to_json() const;
};

struct LayoutConfig {
  int64_t num_classes = 4;
  std::string label_pattern = kDefaultLabelPattern;
  std::string image_dir = "img";   // under val/ and test/
  std::string mask_dir = "mask";
  std::vector<std::string> extensions{".png"};
};

/// Label vector parsed from a file name, or nullopt when the pattern is absent or has the wrong length.
std::optional<std::vector<double>> parse_label(const std::string& filename, const std::string& pattern,
                                               int64_t num_classes);

/// Expects root/train, root/val/{img,mask}, root/test/{img,mask}; files are visited in lexicographic order.
DatasetManifest scan_dataset(const std::string& root, const LayoutConfig& layout = {});

struct MaskEncoding {
  int32_t ignore_value = 0;  // file value excluded from evaluation
  int32_t offset = 1;        // class = file value - offset
};

/// File mask values -> internal class ids (ignored pixels become -1).
Mask decode_mask(const Mask& file_values, const MaskEncoding& enc, int64_t num_classes);
/// Internal class ids -> file values.
Mask encode_mask(const Mask& classes, const MaskEncoding& enc);

/// Classes present in an internal mask, as a multi-hot vector.
std::vector<double> labels_from_mask(const Mask& m, int64_t num_classes);

struct LoadOptions {
  double mean = 0.5;
  double std = 0.5;
  MaskEncoding mask;
  int64_t expected_side = 0;  // 0 accepts any size
};

/// Reads images (and masks where present); records without a filename label take it from their mask.
std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split, const LoadOptions& opt);

struct SynthConfig {
  int64_t train = 8;
  int64_t val = 4;
  int64_t test = 4;
  int64_t side = 224;
  uint64_t seed = 7;
};

struct SynthSplits {
  std::vector<std::pair<RgbImage, Mask>> train, val, test;  // images with internal class masks
};

/// The images generate_blob_dataset writes, in memory (train masks included).
SynthSplits synth_blob_splits(const SynthConfig& cfg);

/// Four textured tissue-like classes on Voronoi blobs, written in the scan_dataset layout with exact masks.
void generate_blob_dataset(const std::string& root, const SynthConfig& cfg);

/// One synthetic image and its internal class mask.
std::pair<RgbImage, Mask> synth_blob_image(int64_t side, const std::vector<int64_t>& classes, std::mt19937_64& rng);

}  // namespace wsseg
