// poifusion: gen / train / eval / gradcheck / report.
// Exit codes: 0 success, 2 validation error, 3 numeric failure, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poifusion/checkpoint.hpp"
#include "poifusion/config.hpp"
#include "poifusion/dataset.hpp"
#include "poifusion/eval.hpp"
#include "poifusion/gradcheck.hpp"
#include "poifusion/report.hpp"
#include "poifusion/train.hpp"

namespace fs = std::filesystem;
using namespace poifusion;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig resolve_config(const Common& c) {
  RunConfig rc = c.config.empty() ? default_run_config() : load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  if (!c.out.empty()) rc.output_dir = c.out;
  return rc;
}

std::vector<Corruption> parse_corruptions(const std::vector<std::string>& specs, std::uint64_t seed) {
  std::vector<Corruption> out;
  for (const std::string& s : specs) {
    if (s == "calib_sweep") {
      for (const Corruption& c : calibration_sweep(seed)) out.push_back(c);
    } else {
      out.push_back(parse_corruption(s, seed));
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PoI-based multi-modal 3D detection decoder on synthetic scenes"};
  app.require_subcommand(1);

  Common gen_opt;
  std::optional<std::size_t> gen_count;
  std::string gen_split = "train";
  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene dataset");
  gen->add_option("--config", gen_opt.config, "Run config JSON (defaults when omitted)");
  gen->add_option("--seed", gen_opt.seed, "Dataset seed (overrides config)");
  gen->add_option("--out", gen_opt.out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes (default: data.<split>_scenes)");
  gen->add_option("--split", gen_split, "train or eval; selects the default count and seed stream")
      ->check(CLI::IsMember({"train", "eval"}));

  Common train_opt;
  std::string train_data;
  std::optional<int> train_workers;
  auto* trn = app.add_subcommand("train", "Train the decoder on a dataset");
  trn->add_option("--config", train_opt.config, "Run config JSON (defaults when omitted)");
  trn->add_option("--seed", train_opt.seed, "Run seed (overrides config)");
  trn->add_option("--out", train_opt.out, "Run directory (default: config output_dir)");
  trn->add_option("--data", train_data, "Dataset directory written by gen")->required();
  trn->add_option("--workers", train_workers, "Scenes processed concurrently (results do not depend on it)");

  std::string eval_ckpt, eval_data, eval_out;
  std::vector<std::string> eval_corruptions;
  std::optional<std::uint64_t> eval_seed;
  std::optional<int> eval_workers;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint, optionally under corruptions");
  evl->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  evl->add_option("--data", eval_data, "Dataset directory written by gen")->required();
  evl->add_option("--out", eval_out, "Directory for eval_report.json (default: checkpoint directory)");
  evl->add_option("--corruption", eval_corruptions,
                  "none | calib:<m> | camdrop:all | camdrop:<i,j> | lidar:<center_deg>,<width_deg> | calib_sweep; "
                  "repeatable");
  evl->add_option("--seed", eval_seed, "Seed for random corruptions (default: run seed)");
  evl->add_option("--workers", eval_workers, "Scenes processed concurrently");

  Common gc_opt;
  std::string gc_block;
  auto* gck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter block");
  gck->add_option("--config", gc_opt.config, "Run config JSON (default: the tiny configuration)");
  gck->add_option("--seed", gc_opt.seed, "Seed");
  gck->add_option("--out", gc_opt.out, "Write the JSON report to this file (stdout otherwise)");
  gck->add_option("--corrupt-block", gc_block, "Negative control: perturb this block's analytic gradient");

  std::string report_dir;
  auto* rpt = app.add_subcommand("report", "Plots and summary for a run directory");
  rpt->add_option("--out", report_dir, "Run directory containing train_log.csv and/or eval_report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) {
      RunConfig rc = resolve_config(gen_opt);
      const bool eval_split = gen_split == "eval";
      const std::size_t count =
          gen_count.value_or(static_cast<std::size_t>(eval_split ? rc.data.eval_scenes : rc.data.train_scenes));
      const std::uint64_t seed = eval_split && !gen_opt.seed ? hash_combine(rc.seed, 0xe7a1) : rc.seed;
      const auto manifest = generate_dataset(rc, seed, count, gen_opt.out);
      std::cout << "wrote " << count << " scenes to " << gen_opt.out << " (config " << manifest.at("config_hash").get<std::string>()
                << ")\n";
    } else if (*trn) {
      RunConfig rc = resolve_config(train_opt);
      if (train_workers) rc.optim.workers = *train_workers;
      rc.validate();
      const auto scenes = load_dataset(train_data);
      const fs::path dir = rc.output_dir;
      fs::create_directories(dir);
      write_file(dir / "config.json", run_config_to_json(rc).dump(1) + "\n");
      const TrainResult res = train(rc, scenes, {dir, &std::cout});
      std::cout << "trained " << res.log.size() << " steps; checkpoints in " << dir.string() << "\n";
    } else if (*evl) {
      auto [rc, params] = load_model(eval_ckpt);
      if (eval_workers) rc.optim.workers = *eval_workers;
      rc.validate();
      const auto scenes = load_dataset(eval_data);
      const auto corruptions = parse_corruptions(eval_corruptions, eval_seed.value_or(rc.seed));
      const EvalReport rep = run_evaluation(params, rc, scenes, corruptions);
      const fs::path dir = eval_out.empty() ? fs::path(eval_ckpt).parent_path() : fs::path(eval_out);
      if (!dir.empty()) fs::create_directories(dir);
      write_file(dir / kEvalReportName, eval_report_to_json(rep).dump(1) + "\n");
      std::cout << "mAP " << rep.clean.ap.map << "\n";
      for (const CorruptionRow& row : rep.corruptions)
        std::cout << "  " << row.label << ": mAP " << row.result.ap.map << "\n";
    } else if (*gck) {
      RunConfig rc = gc_opt.config.empty() ? tiny_config() : load_run_config(gc_opt.config);
      GradcheckOptions opt;
      opt.seed = gc_opt.seed.value_or(rc.seed);
      opt.corrupt_block = gc_block;
      if (!gc_block.empty()) {
        DecoderParams probe = init_model(rc);
        bool known = false;
        for (const NamedTensor& p : probe.parameters()) known |= p.name == gc_block;
        if (!known) throw ConfigError("unknown parameter block '" + gc_block + "'");
      }
      const GradcheckReport rep = gradcheck(rc, opt);
      for (const BlockCheck& b : rep.blocks)
        std::cerr << (b.worst_rel < rep.tolerance ? "ok   " : "FAIL ") << b.name << " worst rel " << b.worst_rel << "\n";
      const std::string text = gradcheck_to_json(rep).dump(1) + "\n";
      if (gc_opt.out.empty()) std::cout << text;
      else write_file(gc_opt.out, text);
      if (!rep.pass) return kExitNumeric;
    } else if (*rpt) {
      const ReportFiles rf = write_report(report_dir);
      for (const std::string& f : rf.written) std::cout << (fs::path(report_dir) / f).string() << "\n";
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
