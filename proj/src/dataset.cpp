#include "wsseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <regex>
#include <set>

#include "json.hpp"
#include "wsseg/io.hpp"

namespace fs = std::filesystem;

namespace wsseg {

std::string DatasetManifest::to_json() const {
  nlohmann::ordered_json j;
  j["num_classes"] = num_classes;
  j["label_pattern"] = label_pattern;
  auto recs = nlohmann::ordered_json::array();
  for (const SampleRecord& r : records) {
    nlohmann::ordered_json e;
    e["image"] = r.image_path;
    e["label"] = r.label;
    e["mask"] = r.mask_path ? nlohmann::ordered_json(*r.mask_path) : nlohmann::ordered_json(nullptr);
    recs.push_back(e);
  }
  j["records"] = recs;
  for (const auto& [k, v] : splits) j["splits"][k] = v;
  for (const auto& [k, v] : skipped) j["skipped"][k] = v;
  return j.dump(1);
}

std::optional<std::vector<double>> parse_label(const std::string& filename, const std::string& pattern,
                                               int64_t num_classes) {
  std::smatch m;
  if (!std::regex_search(filename, m, std::regex(pattern)) || m.size() < 2) return std::nullopt;
  std::vector<double> out;
  for (char ch : m[1].str()) {
    if (ch == '0') out.push_back(0.0);
    if (ch == '1') out.push_back(1.0);
  }
  if (static_cast<int64_t>(out.size()) != num_classes) return std::nullopt;
  return out;
}

namespace {

std::vector<fs::path> list_images(const fs::path& dir, const std::vector<std::string>& exts) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (std::find(exts.begin(), exts.end(), ext) != exts.end()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

}  // namespace

DatasetManifest scan_dataset(const std::string& root, const LayoutConfig& layout) {
  DatasetManifest m;
  m.num_classes = layout.num_classes;
  m.label_pattern = layout.label_pattern;
  const fs::path base(root);
  for (const std::string split : {"train", "val", "test"}) {
    const fs::path sdir = base / split;
    if (!fs::is_directory(sdir)) throw ConfigError("dataset split directory missing: " + sdir.string());
    const bool masked = split != "train";
    const fs::path img_dir = masked ? sdir / layout.image_dir : sdir;
    if (!fs::is_directory(img_dir)) throw ConfigError("dataset image directory missing: " + img_dir.string());
    m.splits[split];
    m.skipped[split] = 0;
    for (const fs::path& p : list_images(img_dir, layout.extensions)) {
      SampleRecord r;
      r.image_path = p.string();
      auto label = parse_label(p.filename().string(), layout.label_pattern, layout.num_classes);
      if (masked) {
        const fs::path mp = sdir / layout.mask_dir / p.filename();
        if (!fs::exists(mp)) {
          ++m.skipped[split];
          continue;
        }
        r.mask_path = mp.string();
        if (label) r.label = *label;
      } else {
        if (!label) {
          ++m.skipped[split];
          continue;
        }
        r.label = *label;
      }
      m.splits[split].push_back(m.records.size());
      m.records.push_back(std::move(r));
    }
  }
  if (m.records.empty()) throw ConfigError("no usable records under " + root);
  return m;
}

Mask decode_mask(const Mask& file_values, const MaskEncoding& enc, int64_t num_classes) {
  Mask out(file_values.height, file_values.width);
  for (size_t i = 0; i < out.labels.size(); ++i) {
    const int32_t v = file_values.labels[i];
    if (v == enc.ignore_value) {
      out.labels[i] = -1;
      continue;
    }
    const int32_t c = v - enc.offset;
    if (c < 0 || c >= num_classes)
      throw ValidationError("mask value " + std::to_string(v) + " does not map to one of " +
                            std::to_string(num_classes) + " classes");
    out.labels[i] = c;
  }
  return out;
}

Mask encode_mask(const Mask& classes, const MaskEncoding& enc) {
  Mask out(classes.height, classes.width);
  for (size_t i = 0; i < out.labels.size(); ++i)
    out.labels[i] = classes.labels[i] < 0 ? enc.ignore_value : classes.labels[i] + enc.offset;
  return out;
}

std::vector<double> labels_from_mask(const Mask& m, int64_t num_classes) {
  std::vector<double> out(static_cast<size_t>(num_classes), 0.0);
  for (int32_t v : m.labels)
    if (v >= 0 && v < num_classes) out[v] = 1.0;
  return out;
}

std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split, const LoadOptions& opt) {
  std::vector<Sample> out;
  for (size_t idx : m.splits.at(split)) {
    const SampleRecord& r = m.records[idx];
    Sample s;
    s.id = fs::path(r.image_path).stem().string();
    const RgbImage img = read_png_rgb(r.image_path);
    if (opt.expected_side > 0 && (img.height != opt.expected_side || img.width != opt.expected_side))
      throw ConfigError(r.image_path + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                        ", the encoder expects " + std::to_string(opt.expected_side) + " square");
    s.image = image_to_tensor(img, opt.mean, opt.std);
    if (r.mask_path) {
      s.mask = decode_mask(read_png_labels(*r.mask_path), opt.mask, m.num_classes);
      if (s.mask->height != img.height || s.mask->width != img.width)
        throw ValidationError(*r.mask_path + " does not match its image size");
    }
    s.label = !r.label.empty() ? r.label
                               : (s.mask ? labels_from_mask(*s.mask, m.num_classes)
                                         : std::vector<double>(static_cast<size_t>(m.num_classes), 0.0));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb mix(Rgb a, Rgb b, double t) { return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t}; }

// Texture for one class at pixel (x, y); `phase` varies per image.
Rgb texture(int64_t cls, double x, double y, const std::vector<std::pair<double, double>>& dots, double phase) {
  auto near_dot = [&](double radius) {
    double best = 1e9;
    for (const auto& [dx, dy] : dots) best = std::min(best, (x - dx) * (x - dx) + (y - dy) * (y - dy));
    return std::sqrt(best) < radius;
  };
  switch (cls) {
    case 0: {  // tumor: purple sheet with large dark nuclei
      const Rgb base{150, 80, 170}, nucleus{70, 20, 110};
      return near_dot(4.5) ? nucleus : base;
    }
    case 1: {  // stroma: pink with wavy fibres
      const double s = std::sin(0.35 * (x + 6.0 * std::sin(0.05 * y + phase)) + phase);
      return mix(Rgb{235, 150, 185}, Rgb{200, 90, 140}, 0.5 + 0.5 * s);
    }
    case 2: {  // lymphocytes: dense small dark-blue dots
      return near_dot(2.5) ? Rgb{35, 35, 130} : Rgb{170, 160, 215};
    }
    default: {  // necrosis: pale, low-contrast granular
      const double s = std::sin(0.9 * x + phase) * std::sin(0.8 * y - phase);
      return mix(Rgb{238, 228, 212}, Rgb{215, 200, 185}, 0.5 + 0.5 * s);
    }
  }
}

}  // namespace

std::pair<RgbImage, Mask> synth_blob_image(int64_t side, const std::vector<int64_t>& classes, std::mt19937_64& rng) {
  if (classes.empty()) throw ValidationError("synthetic image needs at least one class");
  std::uniform_real_distribution<double> u(0.0, static_cast<double>(side));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 6.0);

  // Voronoi seeds: every requested class owns at least one.
  std::vector<std::pair<double, double>> seeds;
  std::vector<int64_t> owner;
  const int64_t extra = static_cast<int64_t>(rng() % 3);
  for (int64_t i = 0; i < static_cast<int64_t>(classes.size()) + extra; ++i) {
    seeds.emplace_back(u(rng), u(rng));
    owner.push_back(i < static_cast<int64_t>(classes.size()) ? classes[i] : classes[rng() % classes.size()]);
  }
  const double warp_a = u01(rng) * 2.0 * M_PI, warp_b = u01(rng) * 2.0 * M_PI;

  // Dot centres for the nuclear textures.
  std::vector<std::pair<double, double>> big, small;
  for (int i = 0; i < side * side / 180; ++i) big.emplace_back(u(rng), u(rng));
  for (int i = 0; i < side * side / 45; ++i) small.emplace_back(u(rng), u(rng));
  const double phase = u01(rng) * 2.0 * M_PI;

  // Bucket dots on a coarse grid so texture lookups stay local.
  const int64_t cell = 8, cells = (side + cell - 1) / cell;
  auto bucket = [&](const std::vector<std::pair<double, double>>& pts) {
    std::vector<std::vector<std::pair<double, double>>> b(static_cast<size_t>(cells * cells));
    for (const auto& p : pts) {
      const auto cx = std::min<int64_t>(cells - 1, static_cast<int64_t>(p.first) / cell);
      const auto cy = std::min<int64_t>(cells - 1, static_cast<int64_t>(p.second) / cell);
      b[cy * cells + cx].push_back(p);
    }
    return b;
  };
  const auto big_b = bucket(big), small_b = bucket(small);
  auto local = [&](const std::vector<std::vector<std::pair<double, double>>>& b, int64_t x, int64_t y) {
    std::vector<std::pair<double, double>> out;
    const int64_t cx = x / cell, cy = y / cell;
    for (int64_t yy = std::max<int64_t>(0, cy - 1); yy <= std::min(cells - 1, cy + 1); ++yy)
      for (int64_t xx = std::max<int64_t>(0, cx - 1); xx <= std::min(cells - 1, cx + 1); ++xx)
        out.insert(out.end(), b[yy * cells + xx].begin(), b[yy * cells + xx].end());
    return out;
  };

  RgbImage img(side, side);
  Mask mask(side, side);
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      const double wx = x + 10.0 * std::sin(0.04 * y + warp_a);
      const double wy = y + 10.0 * std::sin(0.04 * x + warp_b);
      size_t best = 0;
      double bd = 1e18;
      for (size_t s = 0; s < seeds.size(); ++s) {
        const double d = (wx - seeds[s].first) * (wx - seeds[s].first) + (wy - seeds[s].second) * (wy - seeds[s].second);
        if (d < bd) {
          bd = d;
          best = s;
        }
      }
      const int64_t cls = owner[best];
      mask.at(y, x) = static_cast<int32_t>(cls);
      const auto& dots = cls == 0 ? local(big_b, x, y) : local(small_b, x, y);
      const Rgb c = texture(cls, static_cast<double>(x), static_cast<double>(y), dots, phase);
      uint8_t* px = img.at(y, x);
      px[0] = static_cast<uint8_t>(std::clamp(c.r + noise(rng), 0.0, 255.0));
      px[1] = static_cast<uint8_t>(std::clamp(c.g + noise(rng), 0.0, 255.0));
      px[2] = static_cast<uint8_t>(std::clamp(c.b + noise(rng), 0.0, 255.0));
    }
  // A class can lose every pixel to a neighbouring seed; the label follows the mask, not the request.
  return {std::move(img), std::move(mask)};
}

SynthSplits synth_blob_splits(const SynthConfig& cfg) {
  if (cfg.train < 0 || cfg.val < 0 || cfg.test < 0 || cfg.side < 16) throw ConfigError("invalid synth config");
  std::mt19937_64 rng(cfg.seed);
  auto pick_classes = [&](int64_t i) {
    // Cycle through class subsets so every class appears both present and absent.
    std::vector<int64_t> cls;
    const int64_t first = i % 4;
    cls.push_back(first);
    const int64_t n = 1 + static_cast<int64_t>(rng() % 2);
    for (int64_t k = 1; k <= n; ++k) {
      const int64_t c = (first + k + static_cast<int64_t>(rng() % 2)) % 4;
      if (std::find(cls.begin(), cls.end(), c) == cls.end()) cls.push_back(c);
    }
    return cls;
  };
  SynthSplits out;
  for (int64_t i = 0; i < cfg.train; ++i) out.train.push_back(synth_blob_image(cfg.side, pick_classes(i), rng));
  for (auto [split, count] : {std::pair{&out.val, cfg.val}, {&out.test, cfg.test}})
    for (int64_t i = 0; i < count; ++i) split->push_back(synth_blob_image(cfg.side, pick_classes(i + 1), rng));
  return out;
}

void generate_blob_dataset(const std::string& root, const SynthConfig& cfg) {
  const SynthSplits data = synth_blob_splits(cfg);
  const fs::path base(root);
  fs::create_directories(base / "train");
  for (const char* s : {"val", "test"}) {
    fs::create_directories(base / s / "img");
    fs::create_directories(base / s / "mask");
  }
  const MaskEncoding enc;
  char name[64];
  for (size_t i = 0; i < data.train.size(); ++i) {
    const auto& [img, mask] = data.train[i];
    const auto label = labels_from_mask(mask, 4);
    std::snprintf(name, sizeof(name), "patch_%04zu_[%d %d %d %d].png", i, static_cast<int>(label[0]),
                  static_cast<int>(label[1]), static_cast<int>(label[2]), static_cast<int>(label[3]));
    write_png_rgb(img, (base / "train" / name).string());
  }
  for (const auto& [split, items] : {std::pair{"val", &data.val}, {"test", &data.test}})
    for (size_t i = 0; i < items->size(); ++i) {
      std::snprintf(name, sizeof(name), "patch_%04zu.png", i);
      write_png_rgb((*items)[i].first, (base / split / "img" / name).string());
      write_png_labels(encode_mask((*items)[i].second, enc), (base / split / "mask" / name).string(), mask_palette());
    }
}

}  // namespace wsseg
