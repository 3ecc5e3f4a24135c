// Command-line entry point: synthetic fixtures, training, inference,
// evaluation and the stain/tiling utilities.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "dysp/error.hpp"
#include "dysp/eval.hpp"
#include "dysp/infer.hpp"
#include "dysp/stain.hpp"
#include "dysp/synth.hpp"
#include "dysp/train.hpp"
#include "dysp/wsi.hpp"
#include "json.hpp"

using namespace dysp;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw IoError(std::string(what) + " directory " + dir.string() + " does not exist");
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " " + path.string() + " does not exist");
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

// Tile overlap that keeps the 184/512 ratio of the full-size setting.
std::size_t scaled_overlap(std::size_t patch) {
  return static_cast<std::size_t>(std::lround(static_cast<double>(patch) * 184.0 / 512.0));
}

ModelConfig model_config(const std::string& name) {
  if (name == "toy") return ModelConfig::toy();
  if (name == "full") return ModelConfig::full();
  require_file(name, "model config");
  ModelConfig cfg = read_json(name).get<ModelConfig>();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  fs::path out;
  std::string config;
  std::size_t cases = 2;
  std::size_t controls = 1;
  std::size_t width = 512;
  std::size_t height = 384;
  double mpp = 0.5;
  std::size_t sections = 2;
  std::size_t blobs = 3;
  double target = 0.08;
  std::vector<std::string> scanners{"synthA"};
  std::size_t patch = 64;
  std::size_t overlap = 23;
  double min_tissue = 0.1;
  std::uint64_t seed = 0;
};

void run_synth(const SynthArgs& a, const CLI::App& cmd) {
  synth::SlideSpec base;
  base.width = a.width;
  base.height = a.height;
  base.mpp = a.mpp;
  base.sections = a.sections;
  base.blobs = a.blobs;
  base.target_fraction = a.target;
  std::size_t cases = a.cases, controls = a.controls, patch = a.patch, overlap = a.overlap;
  double min_tissue = a.min_tissue;
  std::vector<std::string> scanners = a.scanners;
  std::uint64_t seed = a.seed;
  if (!a.config.empty()) {
    const json j = read_json(a.config);
    static const std::set<std::string> known{"slide", "cases", "controls", "scanners", "patch", "overlap", "min_tissue", "seed"};
    for (const auto& [k, _] : j.items())
      if (!known.count(k)) throw ConfigError("unknown synth config key '" + k + "'");
    try {
      if (j.contains("slide")) j.at("slide").get_to(base);
      cases = j.value("cases", cases);
      controls = j.value("controls", controls);
      scanners = j.value("scanners", scanners);
      patch = j.value("patch", patch);
      overlap = j.value("overlap", overlap);
      min_tissue = j.value("min_tissue", min_tissue);
      seed = j.value("seed", seed);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid synth config: ") + e.what());
    }
  }
  // flags given on the command line win over the config file
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--width")) base.width = a.width;
  if (given("--height")) base.height = a.height;
  if (given("--mpp")) base.mpp = a.mpp;
  if (given("--sections")) base.sections = a.sections;
  if (given("--blobs")) base.blobs = a.blobs;
  if (given("--target")) base.target_fraction = a.target;
  if (given("--cases")) cases = a.cases;
  if (given("--controls")) controls = a.controls;
  if (given("--scanners")) scanners = a.scanners;
  if (given("--patch")) patch = a.patch;
  if (given("--overlap")) overlap = a.overlap;
  if (given("--min-tissue")) min_tissue = a.min_tissue;
  if (given("--seed")) seed = a.seed;
  if (cases + controls == 0) throw ConfigError("nothing to generate: --cases and --controls are both 0");
  if (scanners.empty()) throw ConfigError("at least one scanner name is required");
  if (overlap >= patch) throw ConfigError("overlap must be smaller than the patch size");
  base.validate();

  make_out_dir(a.out / "slides");
  std::vector<synth::SynthSlide> slides;
  std::vector<std::string> ids;
  json listing = json::array();
  for (std::size_t i = 0; i < cases + controls; ++i) {
    const bool control = i >= cases;
    synth::SlideSpec spec = base;
    if (control) spec.blobs = 0;
    const std::size_t k = i % scanners.size();
    spec.scanner = scanners[k];
    spec.stains = synth::scanner_stains(k);
    spec.seed = derive_rng({seed, 0x5e17, i})();
    char id[32];
    std::snprintf(id, sizeof id, "%s_%03zu", control ? "control" : "case", control ? i - cases : i);
    slides.push_back(synth::generate_slide(spec, id));
    synth::write_slide(a.out / "slides" / id, slides.back());
    ids.push_back(id);
    listing.push_back({{"id", id}, {"spec", spec}});
  }
  std::vector<wsi::SlideInput> inputs;
  for (std::size_t i = 0; i < slides.size(); ++i)
    inputs.push_back({&slides[i].pyramid, &slides[i].truth.mask, fs::path("slides") / ids[i]});
  const wsi::Manifest rows = wsi::build_patch_dataset(inputs, patch, overlap, min_tissue);
  wsi::write_manifest(a.out / "manifest.jsonl", rows);
  write_text(a.out / "synth.json",
             json{{"slides", listing}, {"patch", patch}, {"overlap", overlap}, {"min_tissue", min_tissue}, {"seed", seed}}
                     .dump(2) +
                 "\n");
  std::size_t dysplastic = 0;
  for (const auto& r : rows) dysplastic += r.label == wsi::TileLabel::Dysplastic;
  std::printf("wrote %zu slides and %zu patches (%zu dysplastic) to %s\n", slides.size(), rows.size(), dysplastic,
              a.out.string().c_str());
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  fs::path manifest, out;
  std::string config, model = "toy", loss = "dice_ce";
  std::size_t phase1 = 20, phase2 = 30, decay = 10, batch = 4, workers = 1;
  double lr_hi = 1e-4, lr_lo = 1e-5, val_fraction = 0.1, da_weight = 1.0;
  bool ws = false, sa = false, da = false, augment = false;
  std::uint64_t seed = 0;
};

void run_train(const TrainArgs& a, const CLI::App& cmd) {
  require_file(a.manifest, "manifest");
  train::TrainConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config, "training config");
    read_json(a.config).get_to(cfg);
  }
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--phase1-epochs")) cfg.phase1_epochs = a.phase1;
  if (given("--phase2-epochs")) cfg.phase2_epochs = a.phase2;
  if (given("--decay-epoch")) cfg.decay_epoch = a.decay;
  if (given("--lr-hi")) cfg.lr_hi = a.lr_hi;
  if (given("--lr-lo")) cfg.lr_lo = a.lr_lo;
  if (given("--batch-size")) cfg.batch_size = a.batch;
  if (given("--loss")) cfg.loss.kind = losses::parse_loss_kind(a.loss);
  if (given("--ws")) cfg.dg.ws = true;
  if (given("--sa")) cfg.dg.sa = true;
  if (given("--da")) cfg.dg.da = true;
  if (given("--da-weight")) cfg.dg.da_weight = a.da_weight;
  if (given("--augment")) cfg.augment = augment::AugmentPolicy{};
  if (given("--val-fraction")) cfg.val_fraction = a.val_fraction;
  if (given("--workers")) cfg.workers = a.workers;
  if (given("--seed")) cfg.seed = a.seed;
  cfg.validate();

  const wsi::Manifest rows = wsi::read_manifest(a.manifest);
  if (rows.empty()) throw ValidationError("manifest " + a.manifest.string() + " has no rows");
  ModelConfig mc = model_config(a.model);
  const std::size_t tile = rows.front().tile.size;
  for (const auto& r : rows)
    if (r.tile.size != tile) throw ValidationError("manifest mixes tile sizes " + std::to_string(tile) + " and " + std::to_string(r.tile.size));
  if (mc.input_size != tile)
    throw ConfigError("model input size " + std::to_string(mc.input_size) + " does not match the manifest's " +
                      std::to_string(tile) + "-px tiles");
  const auto scanners = train::scanner_list(rows);
  if (cfg.dg.da) {
    if (scanners.size() < 2)
      throw ConfigError("--da needs at least two scanners in the manifest, found " + std::to_string(scanners.size()));
    mc.num_domains = scanners.size();
  }

  make_out_dir(a.out);
  const auto [train_idx, val_idx] = train::split_by_slide(rows, cfg.val_fraction, cfg.seed);
  const auto train_set = train::load_samples(rows, train_idx, scanners);
  const auto val_set = train::load_samples(rows, val_idx, scanners);
  std::printf("training on %zu patches, validating on %zu (loss %s)\n", train_set.size(), val_set.size(),
              losses::to_string(cfg.loss.kind).c_str());
  write_text(a.out / "train_config.json", json(cfg).dump(2) + "\n");

  TransUnet model = TransUnet::build(mc, derive_rng({cfg.seed, 0x30de1})());
  std::ofstream log(a.out / "metrics.jsonl");
  if (!log) throw IoError("cannot write " + (a.out / "metrics.jsonl").string());
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochMetrics& m) {
    log << json(m).dump() << "\n";
    log.flush();
    std::printf("phase %d epoch %zu  loss %.5f  val F1 %s  lr %g\n", m.phase, m.epoch, m.loss,
                m.val_f1 ? std::to_string(*m.val_f1).c_str() : "-", m.lr);
    std::fflush(stdout);
  };
  hooks.on_phase_end = [&](int phase, const TransUnet& m) {
    train::save_model(a.out / ("phase" + std::to_string(phase) + ".ckpt"), m, {{"phase", phase}, {"scanners", scanners}});
  };
  train::two_phase_train(model, train_set, val_set, cfg, hooks);
  train::save_model(a.out / "model.ckpt", model, {{"scanners", scanners}, {"train", cfg}});
  std::printf("wrote %s\n", (a.out / "model.ckpt").string().c_str());
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  fs::path slide, model, out;
  std::string postprocess;
  std::optional<std::size_t> overlap;
  std::size_t workers = 1;
  double min_tissue = 0.1;
  infer::PostprocessParams pp{};
  bool no_outline = false;
};

void run_infer(const InferArgs& a, const CLI::App& cmd) {
  require_dir(a.slide, "slide");
  require_file(a.model, "checkpoint");
  infer::PostprocessParams pp;
  if (!a.postprocess.empty()) read_json(a.postprocess).get_to(pp);
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--threshold")) pp.threshold = a.pp.threshold;
  if (given("--close")) pp.close_kernel = a.pp.close_kernel;
  if (given("--open")) pp.open_kernel = a.pp.open_kernel;
  if (given("--min-object")) pp.min_object_area = a.pp.min_object_area;
  if (given("--min-hole")) pp.min_hole_area = a.pp.min_hole_area;
  pp.validate();

  const wsi::WsiPyramid slide = wsi::WsiPyramid::open(a.slide);
  const TransUnet model = train::load_model(a.model);
  infer::InferOptions opts;
  opts.patch = model.config().input_size;
  opts.overlap = a.overlap.value_or(scaled_overlap(opts.patch));
  opts.min_tissue_frac = a.min_tissue;
  opts.workers = a.workers;
  if (opts.overlap >= opts.patch) throw ConfigError("overlap must be smaller than the model's input size");

  make_out_dir(a.out);
  infer::ProbabilityCanvas canvas = infer::infer_canvas(slide, model, opts);
  const Mask pred = infer::post_process(infer::binarize(canvas, pp.threshold), pp);
  write_png(a.out / "pred.png", mask_to_png_levels(pred));
  canvas.save(a.out / "canvas.f32", a.out / "canvas.json");

  const Image thumb = wsi::read_region(slide, 0, 0, canvas.width(), canvas.height(), 1.0);
  std::optional<Mask> gt;
  if (!a.no_outline && fs::exists(a.slide / "gt.png")) gt = binarize_levels(read_png(a.slide / "gt.png"));
  write_png(a.out / "heatmap.png", infer::emit_heatmap(canvas, thumb, gt ? &*gt : nullptr));
  std::printf("%s: %zu of %zu canvas pixels predicted dysplastic\n", slide.id.c_str(), count_foreground(pred),
              pred.pixel_count());
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::vector<fs::path> pred, gt;
  fs::path out;
  std::string pred_name = "pred.png";
  std::size_t workers = 1;
};

void run_eval(const EvalArgs& a) {
  if (a.pred.size() != a.gt.size())
    throw ConfigError("got " + std::to_string(a.pred.size()) + " --pred and " + std::to_string(a.gt.size()) +
                      " --gt entries; they pair up by position");
  std::vector<eval::RoiRow> rows;
  json sources = json::array();
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const fs::path pred_png = fs::is_directory(a.pred[i]) ? a.pred[i] / a.pred_name : a.pred[i];
    require_file(pred_png, "prediction");
    require_dir(a.gt[i], "ground-truth");
    require_file(a.gt[i] / "gt.png", "ground truth");
    require_file(a.gt[i] / "roi.png", "ROI map");
    const wsi::GroundTruth gt = wsi::ground_truth_from_pngs(read_png(a.gt[i] / "gt.png"), read_png(a.gt[i] / "roi.png"));
    const Mask pred = binarize_levels(read_png(pred_png));
    std::string slide = a.gt[i].filename().string();
    if (slide.empty()) slide = a.gt[i].parent_path().filename().string();
    for (const auto& c : eval::confuse_all(pred, gt, a.workers)) rows.push_back(eval::make_row(slide, c));
    sources.push_back({{"slide", slide}, {"pred", pred_png.string()}, {"gt", a.gt[i].string()}});
  }
  const eval::EvalReport report = eval::aggregate(std::move(rows), {{"sources", sources}, {"aggregation", "macro"}});
  make_out_dir(a.out);
  const std::string table = eval::format_table(report);
  write_text(a.out / "report.json", json(report).dump(2) + "\n");
  write_text(a.out / "report.txt", table);
  std::fputs(table.c_str(), stdout);
}

// ---------------------------------------------------------------- stain / tile / describe

struct StainArgs {
  fs::path image, out, target;
  double beta = 0.15, alpha = 1.0;
  stain::AugmentParams aug{};
  std::uint64_t seed = 0;
};

void run_stain_estimate(const StainArgs& a) {
  require_file(a.image, "image");
  const auto m = stain::estimate_stain_matrix(read_png(a.image), a.beta, a.alpha);
  const std::string text = json(m).dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::fputs(text.c_str(), stdout);
}

void run_stain_augment(const StainArgs& a) {
  require_file(a.image, "image");
  stain::AugmentParams p = a.aug;
  p.beta = a.beta;
  p.alpha = a.alpha;
  Rng rng = derive_rng({a.seed, 0x57a1});
  write_png(a.out, stain::augment_stain(read_png(a.image), p, rng));
}

void run_stain_normalize(const StainArgs& a) {
  require_file(a.image, "image");
  stain::StainMatrix target = stain::reference_matrix();
  if (!a.target.empty()) read_json(a.target).get_to(target);
  write_png(a.out, stain::normalize(read_png(a.image), target, a.beta, a.alpha));
}

struct TileArgs {
  std::size_t width = 0, height = 0, patch = 512, overlap = 184;
  double mpp = 1.0;
};

void run_tile(const TileArgs& a) {
  for (const auto& t : wsi::tessellate(a.width, a.height, a.patch, a.overlap, a.mpp, "canvas"))
    std::printf("%s\n", json(t).dump().c_str());
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const IoError*>(&e))
    return 2;
  return 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dysplasia segmentation pipeline: synthetic slides, training, tiled inference and ROI evaluation"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic slides, ground truth and a patch manifest");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--config", sa.config, "JSON file with slide spec and counts; flags override it");
  synth_cmd->add_option("--cases", sa.cases, "Number of slides with lesions");
  synth_cmd->add_option("--controls", sa.controls, "Number of lesion-free control slides");
  synth_cmd->add_option("--width", sa.width, "Canvas width at 1.0 mpp");
  synth_cmd->add_option("--height", sa.height, "Canvas height at 1.0 mpp");
  synth_cmd->add_option("--mpp", sa.mpp, "Base level resolution in microns per pixel");
  synth_cmd->add_option("--sections", sa.sections, "Tissue sections per slide");
  synth_cmd->add_option("--blobs", sa.blobs, "Lesions per case slide");
  synth_cmd->add_option("--target", sa.target, "Lesion area as a fraction of the canvas");
  synth_cmd->add_option("--scanners", sa.scanners, "Scanner names, assigned round-robin with distinct stains")
      ->delimiter(',');
  synth_cmd->add_option("--patch", sa.patch, "Manifest patch size in canvas pixels");
  synth_cmd->add_option("--overlap", sa.overlap, "Manifest patch overlap");
  synth_cmd->add_option("--min-tissue", sa.min_tissue, "Minimum tissue fraction for a manifest patch");
  synth_cmd->add_option("--seed", sa.seed, "Random seed");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Two-phase training on a patch manifest");
  train_cmd->add_option("--manifest", ta.manifest, "Patch manifest (JSON lines)")->required();
  train_cmd->add_option("--out", ta.out, "Output directory for checkpoints and metrics")->required();
  train_cmd->add_option("--config", ta.config, "Training config JSON; flags override it");
  train_cmd->add_option("--model", ta.model, "Model size: toy, full, or a model config JSON file");
  train_cmd->add_option("--phase1-epochs", ta.phase1, "Decoder-only epochs");
  train_cmd->add_option("--phase2-epochs", ta.phase2, "Whole-network epochs");
  train_cmd->add_option("--decay-epoch", ta.decay, "Epoch within each phase where the learning rate drops");
  train_cmd->add_option("--lr-hi", ta.lr_hi, "Learning rate before the decay epoch");
  train_cmd->add_option("--lr-lo", ta.lr_lo, "Learning rate from the decay epoch on");
  train_cmd->add_option("--batch-size", ta.batch, "Patches per update");
  train_cmd->add_option("--loss", ta.loss, "dice, jaccard, ce, dice_ce or jaccard_ce");
  train_cmd->add_flag("--ws", ta.ws, "Weighted sampling by scanner and label");
  train_cmd->add_flag("--sa", ta.sa, "Stain augmentation");
  train_cmd->add_flag("--da", ta.da, "Domain-adversarial branch over scanners");
  train_cmd->add_option("--da-weight", ta.da_weight, "Weight of the domain loss");
  train_cmd->add_flag("--augment", ta.augment, "Flip, rotation, blur and colour augmentation");
  train_cmd->add_option("--val-fraction", ta.val_fraction, "Fraction of slides held out for validation");
  train_cmd->add_option("--workers", ta.workers, "Data preparation threads");
  train_cmd->add_option("--seed", ta.seed, "Random seed");

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "Tiled inference on one slide");
  infer_cmd->add_option("--slide", ia.slide, "Slide directory (meta.json and level PNGs)")->required();
  infer_cmd->add_option("--model", ia.model, "Checkpoint written by train")->required();
  infer_cmd->add_option("--out", ia.out, "Output directory")->required();
  infer_cmd->add_option("--workers", ia.workers, "Inference threads; outputs do not depend on it");
  infer_cmd->add_option("--overlap", ia.overlap, "Tile overlap (default: 184/512 of the model input size)");
  infer_cmd->add_option("--min-tissue", ia.min_tissue, "Minimum tissue fraction for a tile to be run");
  infer_cmd->add_option("--postprocess", ia.postprocess, "Post-processing JSON; flags override it");
  infer_cmd->add_option("--threshold", ia.pp.threshold, "Probability threshold (strictly greater)");
  infer_cmd->add_option("--close", ia.pp.close_kernel, "Closing kernel size");
  infer_cmd->add_option("--open", ia.pp.open_kernel, "Opening kernel size");
  infer_cmd->add_option("--min-object", ia.pp.min_object_area, "Smallest kept object in pixels");
  infer_cmd->add_option("--min-hole", ia.pp.min_hole_area, "Largest filled hole in pixels");
  infer_cmd->add_flag("--no-outline", ia.no_outline, "Do not draw the slide's gt.png outline on the heatmap");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "ROI-level metrics of predictions against ground truth");
  eval_cmd->add_option("--pred", ea.pred, "Prediction directories or PNGs, paired with --gt by position")
      ->required();
  eval_cmd->add_option("--gt", ea.gt, "Slide directories holding gt.png and roi.png")->required();
  eval_cmd->add_option("--out", ea.out, "Output directory for report.json and report.txt")->required();
  eval_cmd->add_option("--pred-name", ea.pred_name, "File name looked up inside prediction directories");
  eval_cmd->add_option("--workers", ea.workers, "Counting threads");

  StainArgs st;
  auto* stain_cmd = app.add_subcommand("stain", "Stain matrix estimation, augmentation and normalisation");
  stain_cmd->require_subcommand(1);
  auto* est = stain_cmd->add_subcommand("estimate", "Print the estimated stain matrix as JSON");
  auto* aug = stain_cmd->add_subcommand("augment", "Randomly perturb stain concentrations");
  auto* nrm = stain_cmd->add_subcommand("normalize", "Map an image onto a target stain matrix");
  for (auto* c : {est, aug, nrm}) {
    c->add_option("--image", st.image, "Input RGB PNG")->required();
    c->add_option("--beta", st.beta, "Optical density floor for tissue pixels");
    c->add_option("--alpha", st.alpha, "Angle percentile");
  }
  est->add_option("--out", st.out, "Also write the matrix to this file");
  for (auto* c : {aug, nrm}) c->add_option("--out", st.out, "Output PNG")->required();
  aug->add_option("--sigma1", st.aug.sigma1, "Multiplicative concentration spread");
  aug->add_option("--sigma2", st.aug.sigma2, "Additive concentration spread");
  aug->add_option("--seed", st.seed, "Random seed");
  nrm->add_option("--target", st.target, "Target stain matrix JSON (default: built-in reference)");

  TileArgs tl;
  auto* tile_cmd = app.add_subcommand("tile", "Print the tile grid of a canvas as JSON lines");
  tile_cmd->add_option("--width", tl.width, "Canvas width")->required();
  tile_cmd->add_option("--height", tl.height, "Canvas height")->required();
  tile_cmd->add_option("--patch", tl.patch, "Tile size");
  tile_cmd->add_option("--overlap", tl.overlap, "Tile overlap");
  tile_cmd->add_option("--mpp", tl.mpp, "Canvas resolution recorded in each tile");

  std::string describe_model = "toy";
  auto* describe_cmd = app.add_subcommand("describe", "Print a model's layer shapes and parameter count");
  describe_cmd->add_option("--model", describe_model, "toy, full, or a model config JSON file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) run_synth(sa, *synth_cmd);
    if (*train_cmd) run_train(ta, *train_cmd);
    if (*infer_cmd) run_infer(ia, *infer_cmd);
    if (*eval_cmd) run_eval(ea);
    if (*est) run_stain_estimate(st);
    if (*aug) run_stain_augment(st);
    if (*nrm) run_stain_normalize(st);
    if (*tile_cmd) run_tile(tl);
    if (*describe_cmd) {
      const TransUnet m = TransUnet::build(model_config(describe_model), 0);
      std::fputs(m.describe().c_str(), stdout);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
  return 0;
}
