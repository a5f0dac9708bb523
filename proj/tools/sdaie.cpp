// Command-line front end: pretraining, GMM fitting, binary training,
// detection, evaluation and exports.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sdaie/sdaie.hpp"

namespace fs = std::filesystem;
using namespace sdaie;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string checkpoint;
  std::string manifest;
};

nlohmann::json load_config(const Globals& g) {
  if (g.config.empty()) return nlohmann::json::object();
  auto j = io::read_json(g.config);
  if (!j.is_object()) throw Error("config must be a JSON object");
  return j;
}

nlohmann::json section(const nlohmann::json& cfg, const char* name) {
  return cfg.contains(name) ? cfg[name] : nlohmann::json::object();
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw Error(std::string("missing required flag ") + flag);
}

DatasetManifest manifest_of(const Globals& g) {
  require(g.manifest, "--manifest");
  return load_manifest(g.manifest);
}

std::string checkpoint_kind(const fs::path& dir) { return read_checkpoint_schema(dir).value("kind", ""); }

std::string checkpoint_digest(const fs::path& dir) { return read_checkpoint_schema(dir).value("digest", ""); }

Detector load_detector(const fs::path& ckpt, const std::string& gmm_path) {
  if (checkpoint_kind(ckpt) == "binary")
    return Detector::binary(std::make_shared<const BinaryModel<float>>(load_binary<float>(ckpt)));
  auto model = load_pretext<float>(ckpt);
  auto backbone = std::make_shared<const Backbone<float>>(model.backbone());
  return Detector::one_class(backbone, load_gmm(gmm_path.empty() ? ckpt / "gmm.json" : fs::path(gmm_path)));
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff" ||
         ext == ".webp";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photographic-vs-generated image detection from EXIF-supervised features"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--config", g.config, "JSON config with optional sections pretrain, gmm, binary");
  app.add_option("--checkpoint", g.checkpoint, "Checkpoint directory");
  app.add_option("--manifest", g.manifest, "JSON-Lines dataset manifest");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train the extractor on EXIF pretext tasks");
  long iterations = 0;
  std::size_t batch = 0;
  double lr = 0;
  int train_patches = 0;
  bool no_augment = false;
  std::string log_path;
  pre->add_option("--iterations", iterations);
  pre->add_option("--batch-size", batch);
  pre->add_option("--lr", lr);
  pre->add_option("--train-patches", train_patches, "Random crops per image per step");
  pre->add_flag("--no-augment", no_augment);
  pre->add_option("--log", log_path, "Training log CSV (default <checkpoint>/train_log.csv)");

  // fit-gmm
  auto* fit = app.add_subcommand("fit-gmm", "Fit the one-class density on photographic features");
  int K = 0, max_iter = 0;
  double rho = 0, tol = 0, ridge_scale = 0;
  std::string gmm_out;
  fit->add_option("-K,--components", K);
  fit->add_option("--rho", rho, "Threshold quantile");
  fit->add_option("--max-iter", max_iter);
  fit->add_option("--tol", tol);
  fit->add_option("--ridge-scale", ridge_scale);
  fit->add_option("--out", gmm_out, "Output gmm.json (default <checkpoint>/gmm.json)");

  // train-binary
  auto* tb = app.add_subcommand("train-binary", "Train the binary detector with the alignment regularizer");
  double gamma = -1;
  std::string binary_out, cache_path;
  tb->add_option("--iterations", iterations);
  tb->add_option("--batch-size", batch);
  tb->add_option("--lr", lr);
  tb->add_option("--gamma", gamma, "Regularizer weight");
  tb->add_flag("--no-augment", no_augment);
  tb->add_option("--cache", cache_path, "Reference cache archive; built when absent");
  tb->add_option("--out", binary_out, "Output checkpoint directory")->required();
  tb->add_option("--log", log_path, "Training log CSV (default <out>/train_log.csv)");

  // detect
  auto* det = app.add_subcommand("detect", "Classify individual images");
  std::vector<std::string> images;
  std::string gmm_path;
  det->add_option("images", images, "Image files")->required()->check(CLI::ExistingFile);
  det->add_option("--gmm", gmm_path, "gmm.json for a pretext checkpoint (default <checkpoint>/gmm.json)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Accuracy and AP per source, optionally under perturbations");
  std::string op, report_out;
  double param = 0;
  bool grid = false;
  ev->add_option("--gmm", gmm_path);
  ev->add_option("--op", op, "Perturbation: jpeg, blur or down");
  ev->add_option("--param", param, "Quality, sigma or ratio");
  ev->add_flag("--grid", grid, "Run clean, jpeg95, blur1 and down x2");
  ev->add_option("--out", report_out, "Report JSON (default: stdout)");

  // perturb
  auto* pt = app.add_subcommand("perturb", "Apply one perturbation to a directory tree");
  std::string in_dir, out_dir;
  pt->add_option("--op", op)->required();
  pt->add_option("--param", param)->required();
  pt->add_option("--input", in_dir)->required()->check(CLI::ExistingDirectory);
  pt->add_option("--output", out_dir)->required();

  // exports
  auto* es = app.add_subcommand("export-scores", "Write image_path,label,score,decision");
  std::string csv_out;
  es->add_option("--gmm", gmm_path);
  es->add_option("--out", csv_out)->required();
  auto* ef = app.add_subcommand("export-features", "Write image_path,label and the 528 feature values");
  ef->add_option("--out", csv_out)->required();

  // synth
  auto* sy = app.add_subcommand("synth", "Write a synthetic camera/generated toy suite with a manifest");
  synth::SuiteOptions so;
  sy->add_option("--out", out_dir)->required();
  sy->add_option("--camera", so.camera)->capture_default_str();
  sy->add_option("--smooth", so.smooth)->capture_default_str();
  sy->add_option("--blocky", so.blocky)->capture_default_str();
  sy->add_option("--side", so.side)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = load_config(g);

    if (*pre) {
      require(g.checkpoint, "--checkpoint");
      auto pc = PretextConfig::from_json(section(cfg, "pretrain"));
      pc.seed = g.seed;
      if (pre->count("--iterations")) pc.iterations = iterations;
      if (pre->count("--batch-size")) pc.batch_size = batch;
      if (pre->count("--lr")) pc.lr = lr;
      if (pre->count("--train-patches")) pc.arch.train_patches = train_patches;
      if (no_augment) pc.augment = false;
      pc.arch.validate();
      const auto all = manifest_of(g);
      const auto m = filter_complete(all.with_label(Label::photographic));
      std::cerr << "pretrain: " << m.size() << " of " << all.size() << " entries carry complete EXIF\n";
      ImageStore store;
      const long every = std::max(1L, pc.iterations / 20);
      auto r = train_pretext(m, pc, store, g.checkpoint, [&](const TrainLogRow& row) {
        if ((row.iteration + 1) % every == 0) std::cerr << pretext_log_row(row) << "\n";
      });
      if (!log_path.empty()) write_pretext_log(r.log, log_path);
      io::write_json(pc.to_json(), fs::path(g.checkpoint) / "pretrain_config.json");
      std::cout << fs::path(g.checkpoint).string() << "\n";
    } else if (*fit) {
      require(g.checkpoint, "--checkpoint");
      const auto gc = section(cfg, "gmm");
      GmmFitOptions fo;
      fo.seed = g.seed;
      fo.K = fit->count("-K") ? K : gc.value("K", fo.K);
      fo.max_iter = fit->count("--max-iter") ? max_iter : gc.value("max_iter", fo.max_iter);
      fo.tol = fit->count("--tol") ? tol : gc.value("tol", fo.tol);
      fo.ridge_scale = fit->count("--ridge-scale") ? ridge_scale : gc.value("ridge_scale", fo.ridge_scale);
      const double r = fit->count("--rho") ? rho : gc.value("rho", kDefaultRho);
      auto model = load_pretext<float>(g.checkpoint);
      const auto m = manifest_of(g).with_label(Label::photographic);
      if (m.empty()) throw Error("fit-gmm: manifest has no photographic entries");
      ImageStore store;
      MatD x(static_cast<Eigen::Index>(m.size()), model.arch().token_dim());
      for (std::size_t i = 0; i < m.size(); ++i)
        x.row(static_cast<Eigen::Index>(i)) = forward_features(store.get(m.entries[i]), model.backbone()).cast<double>().transpose();
      GmmFitReport rep;
      auto gmm = fit_gmm(x, fo, &rep);
      const VecD s = score_all(x, gmm);
      gmm.rho = r;
      gmm.tau = calibrate_threshold(std::vector<double>(s.data(), s.data() + s.size()), r);
      const fs::path out = gmm_out.empty() ? fs::path(g.checkpoint) / "gmm.json" : fs::path(gmm_out);
      save_gmm(gmm, out);
      std::cerr << "fit-gmm: " << rep.iterations << " EM iterations, final mean log-likelihood "
                << rep.log_likelihood.back() << ", tau " << gmm.tau << "\n";
      for (int k : rep.reseeded) std::cerr << "fit-gmm: component " << k << " re-seeded\n";
      std::cout << out.string() << "\n";
    } else if (*tb) {
      require(g.checkpoint, "--checkpoint");
      auto bc = BinaryConfig::from_json(section(cfg, "binary"));
      bc.seed = g.seed;
      if (tb->count("--iterations")) bc.iterations = iterations;
      if (tb->count("--batch-size")) bc.batch_size = batch;
      if (tb->count("--lr")) bc.lr = lr;
      if (tb->count("--gamma")) bc.gamma = gamma;
      if (no_augment) bc.augment = false;
      auto star = load_pretext<float>(g.checkpoint);
      const std::string digest = checkpoint_digest(g.checkpoint);
      const auto m = manifest_of(g);
      ImageStore store;
      ReferenceCache cache;
      if (!cache_path.empty() && fs::exists(cache_path)) {
        cache = ReferenceCache::load(cache_path);
        if (cache.theta_digest != digest) throw Error("reference cache was built from a different checkpoint");
      } else {
        cache = cache_reference_features(m, star.backbone(), store, bc.augment, digest);
        if (!cache_path.empty()) cache.save(cache_path);
      }
      std::vector<BinaryLogRow> log;
      const long every = std::max(1L, bc.iterations / 20);
      auto model = train_binary(m, star.backbone(), cache, bc, store, &log, [&](const BinaryLogRow& row) {
        if ((row.iteration + 1) % every == 0)
          std::cerr << row.iteration << " cls=" << row.report.cls << " reg=" << row.report.reg
                    << " acc=" << row.report.accuracy << "\n";
      });
      save_binary(model, binary_out, digest);
      io::write_json(bc.to_json(), fs::path(binary_out) / "binary_config.json");
      write_binary_log(log, log_path.empty() ? fs::path(binary_out) / "train_log.csv" : fs::path(log_path));
      std::cout << binary_out << "\n";
    } else if (*det) {
      require(g.checkpoint, "--checkpoint");
      const auto d = load_detector(g.checkpoint, gmm_path);
      for (const auto& p : images) {
        const auto r = d.detect(load_image(p));
        std::cout << nlohmann::json{{"image_path", p},
                                    {"decision", r.generated ? "generated" : "photographic"},
                                    {"score", r.raw}}
                         .dump()
                  << "\n";
      }
    } else if (*ev) {
      require(g.checkpoint, "--checkpoint");
      const auto d = load_detector(g.checkpoint, gmm_path);
      const auto m = manifest_of(g);
      ImageStore store;
      EvalReport rep;
      rep.detector = std::string(d.kind());
      rep.seed = g.seed;
      rep.digests["checkpoint"] = checkpoint_digest(g.checkpoint);
      if (!d.is_binary()) rep.digests["gmm"] = hex64(d.gmm().digest());
      std::vector<std::optional<PerturbationSpec>> conds;
      if (grid) {
        conds = robustness_grid();
      } else if (!op.empty()) {
        conds.push_back(PerturbationSpec{parse_perturb_op(op), param});
      } else {
        conds.push_back(std::nullopt);
      }
      for (const auto& c : conds) rep.conditions.push_back(evaluate(m, d, store, c));
      const auto j = rep.to_json().dump(2);
      if (report_out.empty()) {
        std::cout << j << "\n";
      } else {
        io::write_json(rep.to_json(), report_out);
        std::cout << report_out << "\n";
      }
    } else if (*pt) {
      const PerturbationSpec spec{parse_perturb_op(op), param};
      spec.validate();
      std::size_t n = 0;
      for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        const auto rel = fs::relative(entry.path(), in_dir);
        fs::create_directories((fs::path(out_dir) / rel).parent_path());
        save_image(spec.apply(load_image(entry.path())), fs::path(out_dir) / rel);
        ++n;
      }
      std::cerr << "perturb: " << n << " images written to " << out_dir << "\n";
    } else if (*es) {
      require(g.checkpoint, "--checkpoint");
      const auto d = load_detector(g.checkpoint, gmm_path);
      ImageStore store;
      export_scores(manifest_of(g), d, store, csv_out);
      std::cout << csv_out << "\n";
    } else if (*ef) {
      require(g.checkpoint, "--checkpoint");
      auto model = load_pretext<float>(g.checkpoint);
      ImageStore store;
      export_features(manifest_of(g), model.backbone(), store, csv_out);
      std::cout << csv_out << "\n";
    } else if (*sy) {
      so.seed = g.seed;
      const auto m = synth::write_suite(out_dir, so);
      std::cout << (fs::path(out_dir) / "manifest.jsonl").string() << "\n";
      std::cerr << "synth: " << m.size() << " images\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
