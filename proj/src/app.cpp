#include "wsseg/app.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "wsseg/io.hpp"

namespace fs = std::filesystem;

namespace wsseg {

Json user_layer(const CommandOptions& opt) {
  Json layer = Json::object();
  if (!opt.config_path.empty()) layer = read_json_file(opt.config_path);
  if (!layer.is_object()) throw ConfigError(opt.config_path + ": top level must be an object");
  for (const std::string& o : opt.overrides) apply_override(layer, o);
  if (opt.seed) layer["seed"] = *opt.seed;
  if (opt.crf) layer["crf"]["enabled"] = *opt.crf;
  return layer;
}

Json resolve_config(const CommandOptions& opt) { return merge_config(default_config(), user_layer(opt)); }

Tensor modality_class_maps(const Tensor& fused, const CombinedBank& bank, Modality modality, ag::Reduction reduction,
                           std::vector<bool>* present) {
  if (fused.ndim() != 4 || fused.dim(1) != bank.size())
    throw ValidationError("fused CAM " + shape_str(fused.shape) + " does not match a bank of " +
                          std::to_string(bank.size()) + " prototypes");
  const int64_t B = fused.dim(0), K = fused.dim(1), HW = fused.dim(2) * fused.dim(3), C = bank.num_classes;
  Tensor out({B, C, fused.dim(2), fused.dim(3)});
  std::vector<bool> has(static_cast<size_t>(C), false);
  for (int64_t c = 0; c < C; ++c) {
    std::vector<int64_t> ch;
    for (int64_t k = 0; k < K; ++k)
      if (bank.class_of[k] == c && bank.modality_of[k] == modality) ch.push_back(k);
    if (ch.empty()) continue;
    has[c] = true;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < HW; ++i) {
        double acc = reduction == ag::Reduction::kMax ? -std::numeric_limits<double>::infinity() : 0.0;
        for (int64_t k : ch) {
          const double v = fused[(b * K + k) * HW + i];
          acc = reduction == ag::Reduction::kMax ? std::max(acc, v) : acc + v;
        }
        if (reduction == ag::Reduction::kMean) acc /= static_cast<double>(ch.size());
        out[(b * C + c) * HW + i] = acc;
      }
  }
  if (present) *present = has;
  return out;
}

namespace {

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

std::string data_root(const Json& cfg) {
  const std::string root = cfg.at("data").at("root").get<std::string>();
  if (root.empty()) throw ConfigError("data.root is not set");
  return root;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Cartesian product of "key=v1,v2" sweep specs as lists of overrides.
std::vector<std::vector<std::string>> expand_sweeps(const std::vector<std::string>& sweeps) {
  std::vector<std::vector<std::string>> combos{{}};
  for (const std::string& s : sweeps) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep must look like key=v1,v2: " + s);
    const std::string key = s.substr(0, eq);
    std::vector<std::string> values;
    std::stringstream ss(s.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) values.push_back(v);
    if (values.empty()) throw ConfigError("sweep " + key + " has no values");
    std::vector<std::vector<std::string>> next;
    for (const auto& c : combos)
      for (const auto& val : values) {
        auto n = c;
        n.push_back(key + "=" + val);
        next.push_back(std::move(n));
      }
    combos = std::move(next);
  }
  return combos;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Json model_config_from(const Checkpoint& ck, const CommandOptions& opt) {
  Json cfg = default_config();
  if (!ck.config_json.empty()) cfg = merge_config(cfg, Json::parse(ck.config_json));
  return merge_config(cfg, user_layer(opt));
}

int train_one(const Json& cfg, const std::string& out_path, const std::string& resume, std::ostream& out) {
  const std::string root = data_root(cfg);
  const DatasetManifest manifest = scan_dataset(root, layout_config(cfg));
  for (const auto& [split, n] : manifest.skipped)
    if (n > 0) out << "skipped " << n << " file(s) in " << split << " without a usable label or mask\n";
  auto encoder = build_encoder(cfg);
  const LoadOptions lo = load_options(cfg, encoder->spec().image_side());
  const auto train = load_split(manifest, "train", lo);
  const auto val = load_split(manifest, "val", lo);
  auto model = build_model(cfg, encoder);

  const fs::path ckpt_path(out_path.empty() ? "model.ckpt" : out_path);
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  write_text(ckpt_path.string() + ".config.json", cfg.dump(2) + "\n");
  write_text(ckpt_path.string() + ".manifest.json", manifest.to_json() + "\n");
  std::ofstream log(ckpt_path.string() + ".log.jsonl");

  std::optional<Checkpoint> resumed;
  if (!resume.empty()) resumed = load_checkpoint(resume);
  FitOptions fo;
  fo.log = &log;
  fo.resume = resumed ? &*resumed : nullptr;
  fo.config_json = cfg.dump();
  const FitResult r = fit(*model, train, val, train_config(cfg), fo);
  save_checkpoint(r.checkpoint, ckpt_path.string());
  out << "trained " << r.checkpoint.epoch << " epoch(s) on " << train.size() << " images; ";
  if (r.checkpoint.best_epoch > 0)
    out << "best val mIoU " << fmt(100.0 * r.checkpoint.best_metric) << " at epoch " << r.checkpoint.best_epoch;
  else
    out << "no epochs run, saved the initialization";
  out << "\ncheckpoint: " << ckpt_path.string() << "\n";
  return 0;
}

}  // namespace

int cmd_train(const CommandOptions& opt, std::ostream& out) {
  const Json base_layer = user_layer(opt);
  const auto combos = expand_sweeps(opt.sweeps);
  for (const auto& combo : combos) {
    Json layer = base_layer;
    std::string suffix;
    for (const std::string& o : combo) {
      apply_override(layer, o);
      std::string tag = o;
      std::replace(tag.begin(), tag.end(), '.', '-');
      suffix += "__" + tag;
    }
    const Json cfg = merge_config(default_config(), layer);
    std::string path = opt.out.empty() ? "model.ckpt" : opt.out;
    if (!suffix.empty()) {
      const fs::path p(path);
      path = (p.parent_path() / (p.stem().string() + suffix + p.extension().string())).string();
    }
    if (combos.size() > 1) out << "== " << (suffix.empty() ? "base" : suffix.substr(2)) << "\n";
    train_one(cfg, path, opt.resume, out);
  }
  return 0;
}

int cmd_infer(const CommandOptions& opt, std::ostream& out) {
  if (opt.ckpt.empty()) throw ConfigError("infer needs --ckpt");
  const Checkpoint ck = load_checkpoint(opt.ckpt);
  const Json cfg = model_config_from(ck, opt);
  auto model = build_model(cfg);
  apply_checkpoint(*model, ck, true);
  const bool use_crf = cfg.at("crf").at("enabled").get<bool>();
  const CrfParams crf = crf_params(cfg);
  const LoadOptions lo = load_options(cfg, model->encoder().spec().image_side());

  std::vector<fs::path> inputs;
  if (!opt.input.empty()) {
    if (fs::is_directory(opt.input))
      inputs = png_files(opt.input);
    else
      inputs.push_back(opt.input);
  } else {
    inputs = png_files(fs::path(data_root(cfg)) / opt.split / cfg.at("data").at("image_dir").get<std::string>());
  }
  const fs::path dir(opt.out.empty() ? "predictions" : opt.out);
  fs::create_directories(dir);
  write_text(dir / "config.resolved.json", cfg.dump(2) + "\n");
  for (const fs::path& p : inputs) {
    const RgbImage img = read_png_rgb(p.string());
    if (img.height != lo.expected_side || img.width != lo.expected_side)
      throw ConfigError(p.string() + " must be " + std::to_string(lo.expected_side) + " square");
    Tensor batch = image_to_tensor(img, lo.mean, lo.std);
    batch = batch.reshaped({1, 3, img.height, img.width});
    const Tensor scores = model->class_score_maps(batch);
    const Tensor per = scores.reshaped({scores.dim(1), scores.dim(2), scores.dim(3)});
    const Mask mask = use_crf ? crf_refine(img, softmax_channels(per), crf) : pseudo_mask(scores)[0];
    write_png_labels(encode_mask(mask, lo.mask), (dir / p.filename()).string(), mask_palette());
    if (opt.save_scores) write_npy(per, (dir / (p.stem().string() + ".npy")).string());
  }
  out << "wrote " << inputs.size() << " mask(s) to " << dir.string() << (use_crf ? " (CRF refined)" : "") << "\n";
  return 0;
}

int cmd_eval(const CommandOptions& opt, std::ostream& out) {
  const Json cfg = resolve_config(opt);
  if (opt.pred_dir.empty()) throw ConfigError("eval needs --pred");
  const fs::path gt_dir = opt.gt_dir.empty()
                              ? fs::path(data_root(cfg)) / opt.split / cfg.at("data").at("mask_dir").get<std::string>()
                              : fs::path(opt.gt_dir);
  const auto names = class_names(cfg);
  const auto C = static_cast<int64_t>(names.size());
  const LoadOptions lo = load_options(cfg, 0);
  ConfusionCounts counts(C, -1);
  int64_t n = 0;
  for (const fs::path& g : png_files(gt_dir)) {
    const fs::path p = fs::path(opt.pred_dir) / g.filename();
    if (!fs::exists(p)) throw ConfigError("no prediction for " + g.filename().string() + " in " + opt.pred_dir);
    const Mask gt = decode_mask(read_png_labels(g.string()), lo.mask, C);
    const Mask pred = decode_mask(read_png_labels(p.string()), lo.mask, C);
    accumulate(pred, gt, counts);
    ++n;
  }
  if (n == 0) throw ConfigError("no ground-truth masks in " + gt_dir.string());
  const SegmentationScores s = iou_dice(counts);

  std::ostringstream csv;
  csv << "mIoU,mDice";
  for (const auto& c : names) csv << ",IoU_" << c;
  for (const auto& c : names) csv << ",Dice_" << c;
  csv << "\n" << fmt(100.0 * s.miou) << "," << fmt(100.0 * s.mdice);
  for (const auto& v : s.iou) csv << "," << (v ? fmt(100.0 * *v) : "");
  for (const auto& v : s.dice) csv << "," << (v ? fmt(100.0 * *v) : "");
  csv << "\n";
  const fs::path csv_path = opt.out.empty() ? fs::path(opt.pred_dir) / "metrics.csv" : fs::path(opt.out);
  write_text(csv_path, csv.str());
  write_text(csv_path.string() + ".config.json", cfg.dump(2) + "\n");

  out << "images: " << n << "\n";
  out << std::left << std::setw(8) << "class" << std::right << std::setw(9) << "IoU" << std::setw(9) << "Dice"
      << "\n";
  for (int64_t c = 0; c < C; ++c)
    out << std::left << std::setw(8) << names[c] << std::right << std::setw(9)
        << (s.iou[c] ? fmt(100.0 * *s.iou[c]) : "-") << std::setw(9) << (s.dice[c] ? fmt(100.0 * *s.dice[c]) : "-")
        << "\n";
  out << std::left << std::setw(8) << "mean" << std::right << std::setw(9) << fmt(100.0 * s.miou) << std::setw(9)
      << fmt(100.0 * s.mdice) << "\n";
  out << "metrics: " << csv_path.string() << "\n";
  return 0;
}

int cmd_diagnose(const CommandOptions& opt, std::ostream& out) {
  const Json cfg = resolve_config(opt);
  auto encoder = build_encoder(cfg);
  const auto names = class_names(cfg);
  const auto C = static_cast<int64_t>(names.size());
  auto desc = load_descriptions(cfg);
  const int64_t n_desc = cfg.at("model").at("n_desc").get<int64_t>();
  if (n_desc > 0)
    for (auto& d : desc)
      if (static_cast<int64_t>(d.size()) > n_desc) d.resize(static_cast<size_t>(n_desc));
  const DatasetManifest manifest = scan_dataset(data_root(cfg), layout_config(cfg));
  const LoadOptions lo = load_options(cfg, encoder->spec().image_side());
  const auto samples = load_split(manifest, opt.split, lo);
  if (samples.empty()) throw ConfigError("split " + opt.split + " is empty");

  std::vector<size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::vector<double>> labels;
  for (const Sample& s : samples) labels.push_back(s.label);
  const auto auc = zero_shot_auc(*encoder, desc, stack_images(samples, idx), labels, auc_aggregation(cfg));

  std::optional<SegmentationScores> seg;
  if (!opt.pred_dir.empty()) {
    ConfusionCounts counts(C, -1);
    for (const Sample& s : samples) {
      if (!s.mask) continue;
      const fs::path p = fs::path(opt.pred_dir) / (s.id + ".png");
      if (!fs::exists(p)) throw ConfigError("no prediction " + p.string());
      accumulate(decode_mask(read_png_labels(p.string()), lo.mask, C), *s.mask, counts);
    }
    seg = iou_dice(counts);
  }

  const fs::path dir(opt.out.empty() ? "diagnose" : opt.out);
  std::ostringstream auc_csv, scatter;
  auc_csv << "class,auc\n";
  scatter << "class,auc,iou\n";
  out << "zero-shot AUC on " << samples.size() << " " << opt.split << " images\n";
  for (int64_t c = 0; c < C; ++c) {
    const auto it = auc.find(c);
    auc_csv << names[c] << "," << (it != auc.end() ? fmt(it->second, 4) : "undefined") << "\n";
    out << "  " << std::left << std::setw(6) << names[c] << (it != auc.end() ? fmt(it->second, 4) : "undefined");
    if (seg && it != auc.end() && seg->iou[c]) {
      scatter << names[c] << "," << fmt(it->second, 4) << "," << fmt(*seg->iou[c], 4) << "\n";
      out << "  IoU " << fmt(100.0 * *seg->iou[c]);
    }
    out << "\n";
  }
  write_text(dir / "auc.csv", auc_csv.str());
  if (seg) write_text(dir / "auc_iou.csv", scatter.str());
  write_text(dir / "config.resolved.json", cfg.dump(2) + "\n");
  return 0;
}

int cmd_visualize(const CommandOptions& opt, std::ostream& out) {
  if (opt.ckpt.empty() || opt.input.empty()) throw ConfigError("visualize needs --ckpt and --input");
  const Checkpoint ck = load_checkpoint(opt.ckpt);
  const Json cfg = model_config_from(ck, opt);
  auto model = build_model(cfg);
  apply_checkpoint(*model, ck, true);
  const LoadOptions lo = load_options(cfg, model->encoder().spec().image_side());
  const RgbImage img = read_png_rgb(opt.input);
  if (img.height != lo.expected_side || img.width != lo.expected_side)
    throw ConfigError(opt.input + " must be " + std::to_string(lo.expected_side) + " square");
  Tensor batch = image_to_tensor(img, lo.mean, lo.std).reshaped({1, 3, img.height, img.width});

  ag::NoGradGuard guard;
  const ForwardOutput fwd = model->forward(batch);
  const Tensor& fused = fwd.fused->value;
  const Mask pred = pseudo_mask(fwd.class_scores->value)[0];
  const fs::path dir(opt.out.empty() ? "figures" : opt.out);
  fs::create_directories(dir);

  RgbImage overlay = img;
  const auto& pal = mask_palette();
  for (int64_t i = 0; i < img.height * img.width; ++i) {
    const auto& col = pal[static_cast<size_t>(pred.labels[i] + 1) % pal.size()];
    for (int c = 0; c < 3; ++c)
      overlay.pixels[i * 3 + c] = static_cast<uint8_t>((img.pixels[i * 3 + c] + col[c]) / 2);
  }
  write_png_rgb(overlay, (dir / "overlay.png").string());
  int files = 1;

  const auto names = model->class_names();
  Json ranges = Json::object();
  for (const auto& [modality, tag] : {std::pair{Modality::kText, "text"}, std::pair{Modality::kImage, "image"}}) {
    std::vector<bool> present;
    const Tensor maps = modality_class_maps(fused, fwd.bank, modality, model->config().reduction, &present);
    if (std::none_of(present.begin(), present.end(), [](bool b) { return b; })) {
      out << "no " << tag << "-modality prototypes in this checkpoint; skipping the " << tag << " row\n";
      continue;
    }
    const int64_t H = maps.dim(2), W = maps.dim(3);
    for (size_t c = 0; c < names.size(); ++c) {
      if (!present[c]) continue;
      Tensor m({H, W});
      std::copy_n(maps.data.begin() + static_cast<int64_t>(c) * H * W, H * W, m.data.begin());
      const auto [lo_it, hi_it] = std::minmax_element(m.data.begin(), m.data.end());
      const double lo_v = *lo_it, hi_v = *hi_it, span = hi_v - lo_v;
      for (double& v : m.data) v = span > 0.0 ? (v - lo_v) / span : 0.0;
      const std::string file = std::string(tag) + "_" + names[c] + ".png";
      write_png_gray(m, (dir / file).string());
      ranges[file] = {{"min", lo_v}, {"max", hi_v}};
      ++files;
    }
  }
  write_text(dir / "ranges.json", ranges.dump(2) + "\n");
  write_text(dir / "config.resolved.json", cfg.dump(2) + "\n");
  out << "wrote " << files << " figure(s) to " << dir.string() << "\n";
  return 0;
}

int cmd_synth(const CommandOptions& opt, const SynthConfig& synth, std::ostream& out) {
  if (opt.out.empty()) throw ConfigError("synth needs --out");
  generate_blob_dataset(opt.out, synth);
  out << "wrote " << synth.train << "/" << synth.val << "/" << synth.test << " train/val/test images to " << opt.out
      << "\n";
  return 0;
}

}  // namespace wsseg
