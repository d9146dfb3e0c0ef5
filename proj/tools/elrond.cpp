// Command line front end: one subcommand per pipeline stage plus a full
// pipeline runner. Exit codes: 0 success, 1 validation or usage error,
// 2 runtime failure.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elrond/pipeline.hpp"

namespace {

struct StageOpts {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool force = false;
};

elrond::RunConfig load_cfg(const StageOpts& o, const CLI::App* sub) {
  if (o.config.empty())
    throw std::invalid_argument("missing --config (a run configuration is required)");
  elrond::RunConfig cfg = elrond::load_run_config(o.config);
  if (!o.out.empty()) cfg.out = o.out;
  if (sub->count("--seed") > 0) cfg.seed = o.seed;
  return cfg;
}

std::shared_ptr<StageOpts> add_common(CLI::App* sub) {
  auto o = std::make_shared<StageOpts>();
  sub->add_option("--config", o->config, "run configuration JSON");
  sub->add_option("--out", o->out, "override the output directory");
  sub->add_option("--seed", o->seed, "override the master seed");
  sub->add_flag("--force", o->force, "rerun even when artifacts are current");
  return o;
}

using StageFn = bool (*)(const elrond::RunConfig&, elrond::RunManifest&, bool);

void run_single_stage(const elrond::RunConfig& cfg, const char* name, StageFn fn, bool force) {
  cfg.validate();
  elrond::RunManifest man = elrond::open_manifest(cfg);
  const bool ran = fn(cfg, man, force);
  std::cout << name << ": " << (ran ? "done" : "up to date") << " (" << cfg.out.string() << ")\n";
}

double parse_eps(const std::string& s) {
  if (s.empty() || s == "auto") return 0.0;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("--eps expects a number or 'auto', got '" + s + "'");
  }
  if (used != s.size())
    throw std::invalid_argument("--eps expects a number or 'auto', got '" + s + "'");
  if (v < 0.0) throw std::invalid_argument("--eps must be >= 0");
  return v;
}

nlohmann::json lid_json(const elrond::LidEstimate& est) {
  nlohmann::json j;
  j["concept"] = est.concept_name;
  j["lid"] = est.lid;
  j["eps"] = est.eps;
  j["singular"] = est.singular;
  return j;
}

void print_lid(const elrond::LidEstimate& est, const std::string& label) {
  std::cout << label << "LID " << est.lid << " (eps " << est.eps << ", " << est.singular.size()
            << " singular values";
  if (!est.concept_name.empty()) std::cout << ", concept '" << est.concept_name << "'";
  std::cout << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy diffusion laboratory: concepts, gradients, directions, steering"};
  app.set_version_flag("--version", elrond::kToolVersion);
  app.require_subcommand(1);

  int rc = 0;

  // gen-concept
  {
    auto* sub = app.add_subcommand("gen-concept", "write the concept pair for a run");
    auto o = add_common(sub);
    sub->callback([o, sub] {
      run_single_stage(load_cfg(*o, sub), "gen-concept", elrond::stage_gen_concept, o->force);
    });
  }

  // train-diffusion
  {
    auto* sub = app.add_subcommand("train-diffusion", "train the conditional denoiser");
    auto o = add_common(sub);
    auto steps = std::make_shared<std::size_t>(0);
    auto batch = std::make_shared<std::size_t>(0);
    auto lr = std::make_shared<double>(0.0);
    sub->add_option("--steps", *steps, "override train.steps");
    sub->add_option("--batch", *batch, "override train.batch");
    sub->add_option("--lr", *lr, "override train.lr");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--steps")) cfg.train_steps = *steps;
      if (sub->count("--batch")) cfg.train_batch = *batch;
      if (sub->count("--lr")) cfg.train_lr = *lr;
      run_single_stage(cfg, "train-diffusion", elrond::stage_train_diffusion, o->force);
    });
  }

  // sample
  {
    auto* sub = app.add_subcommand("sample", "generate latents from the trained model");
    auto o = add_common(sub);
    auto count = std::make_shared<std::size_t>(0);
    sub->add_option("--count", *count, "override sample.count");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--count")) cfg.n_samples = *count;
      run_single_stage(cfg, "sample", elrond::stage_sample, o->force);
    });
  }

  // collect-grads
  {
    auto* sub = app.add_subcommand("collect-grads", "collect semantic gradients");
    auto o = add_common(sub);
    auto pairs = std::make_shared<std::size_t>(0);
    auto timestep = std::make_shared<std::size_t>(0);
    auto loss = std::make_shared<std::string>();
    auto workers = std::make_shared<std::size_t>(0);
    sub->add_option("--pairs", *pairs, "override grads.pairs");
    sub->add_option("--timestep", *timestep, "override grads.timestep");
    sub->add_option("--loss", *loss, "override grads.loss (mse, chamfer, mmd)");
    sub->add_option("--workers", *workers, "override grads.workers");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--pairs")) cfg.grad_pairs = *pairs;
      if (sub->count("--timestep")) cfg.grad_timestep = *timestep;
      if (sub->count("--loss")) cfg.grad_loss = *loss;
      if (sub->count("--workers")) cfg.workers = *workers;
      run_single_stage(cfg, "collect-grads", elrond::stage_collect_grads, o->force);
    });
  }

  // decompose-pca
  {
    auto* sub = app.add_subcommand("decompose-pca", "fit the retained principal subspace");
    auto o = add_common(sub);
    auto tau = std::make_shared<double>(0.0);
    sub->add_option("--tau", *tau, "override pca.tau");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--tau")) cfg.tau = *tau;
      run_single_stage(cfg, "decompose-pca", elrond::stage_decompose_pca, o->force);
    });
  }

  // train-sae
  {
    auto* sub = app.add_subcommand("train-sae", "train the sparse dictionary");
    auto o = add_common(sub);
    auto dict = std::make_shared<std::size_t>(0);
    auto k = std::make_shared<std::size_t>(0);
    auto steps = std::make_shared<std::size_t>(0);
    sub->add_option("--dict", *dict, "override sae.dict");
    sub->add_option("--k", *k, "override sae.k");
    sub->add_option("--steps", *steps, "override sae.steps");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--dict")) cfg.sae_dict = *dict;
      if (sub->count("--k")) cfg.sae_k = *k;
      if (sub->count("--steps")) cfg.sae_steps = *steps;
      run_single_stage(cfg, "train-sae", elrond::stage_train_sae, o->force);
    });
  }

  // directions
  {
    auto* sub = app.add_subcommand("directions", "inspect or convert a direction set");
    auto o = add_common(sub);
    auto source = std::make_shared<std::string>("pca");
    auto input = std::make_shared<std::string>();
    auto to = std::make_shared<std::string>();
    sub->add_option("--source", *source, "which run artifact to read (pca or sae)")
        ->check(CLI::IsMember({"pca", "sae"}));
    sub->add_option("--input", *input, "read this direction file instead of a run artifact");
    sub->add_option("--to", *to, "re-save to this path (.json writes JSON, otherwise binary)");
    sub->callback([=] {
      std::filesystem::path path;
      if (!input->empty()) {
        path = *input;
      } else {
        const elrond::RunConfig cfg = load_cfg(*o, sub);
        path = cfg.out / (*source == "pca" ? elrond::artifact::kDirectionsPca
                                           : elrond::artifact::kDirectionsSae);
      }
      const elrond::DirectionSet ds = elrond::load_directions(path);
      std::cout << "directions: " << ds.count() << " x " << ds.d_embed << " (source "
                << ds.source << ", concept '" << ds.concept_name << "')\n";
      for (std::size_t i = 0; i < ds.count(); ++i)
        std::cout << "  [" << i << "] weight " << ds.weights[i] << "\n";
      if (!to->empty()) {
        const std::filesystem::path dest(*to);
        if (dest.extension() == ".json")
          elrond::save_directions_json(dest, ds);
        else
          elrond::save_directions_elds(dest, ds);
        std::cout << "wrote " << dest.string() << "\n";
      }
    });
  }

  // steer
  {
    auto* sub = app.add_subcommand("steer", "sweep steering strength over the grid");
    auto o = add_common(sub);
    auto lambdas = std::make_shared<std::vector<double>>();
    auto skip = std::make_shared<std::size_t>(0);
    auto trials = std::make_shared<std::size_t>(0);
    sub->add_option("--lambda", *lambdas, "override steer.lambda_grid");
    sub->add_option("--skip-steps", *skip, "override steer.skip_steps");
    sub->add_option("--trials", *trials, "override steer.trials");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--lambda")) cfg.lambda_grid = *lambdas;
      if (sub->count("--skip-steps")) cfg.skip_steps = *skip;
      if (sub->count("--trials")) cfg.steer_trials = *trials;
      run_single_stage(cfg, "steer", elrond::stage_steer, o->force);
    });
  }

  // eval
  {
    auto* sub = app.add_subcommand("eval", "score generated samples against ground truth");
    auto o = add_common(sub);
    auto knn = std::make_shared<std::size_t>(0);
    sub->add_option("--k-nn", *knn, "override eval.k_nn");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--k-nn")) cfg.eval_k_nn = *knn;
      run_single_stage(cfg, "eval", elrond::stage_eval, o->force);
    });
  }

  // lid
  {
    auto* sub = app.add_subcommand("lid", "estimate local intrinsic dimension");
    auto o = add_common(sub);
    auto grads = std::make_shared<std::string>();
    auto general = std::make_shared<std::string>();
    auto specific = std::make_shared<std::string>();
    auto eps = std::make_shared<std::string>();
    auto json_out = std::make_shared<std::string>();
    sub->add_option("--grads", *grads, "gradient store to analyze (bypasses --config)");
    sub->add_option("--general", *general, "gradient store for the broader concept");
    sub->add_option("--specific", *specific, "gradient store for the narrower concept");
    sub->add_option("--eps", *eps, "noise floor, a number or 'auto'");
    sub->add_option("--json", *json_out, "also write the estimate to this JSON path");
    sub->callback([=] {
      const double eps_v = parse_eps(*eps);
      if (!general->empty() || !specific->empty()) {
        if (general->empty() || specific->empty())
          throw std::invalid_argument("--general and --specific must be given together");
        const elrond::GradientStore g = elrond::load_store(*general);
        const elrond::GradientStore s = elrond::load_store(*specific);
        const elrond::HierarchyLidReport rep = elrond::hierarchy_lid_compare(g, s, eps_v);
        print_lid(rep.general, "general:  ");
        print_lid(rep.specific, "specific: ");
        std::cout << "margin " << rep.margin << ", "
                  << (rep.verdict ? "general > specific" : "no separation") << "\n";
        if (!json_out->empty()) {
          nlohmann::json j;
          j["general"] = lid_json(rep.general);
          j["specific"] = lid_json(rep.specific);
          j["margin"] = rep.margin;
          j["verdict"] = rep.verdict;
          elrond::io::save_json(*json_out, j);
        }
        return;
      }
      if (!grads->empty()) {
        const elrond::GradientStore store = elrond::load_store(*grads);
        const elrond::LidEstimate est = elrond::estimate_lid(store, eps_v);
        print_lid(est, "");
        if (!json_out->empty()) elrond::io::save_json(*json_out, lid_json(est));
        return;
      }
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--eps")) cfg.lid_eps = eps_v;
      run_single_stage(cfg, "lid", elrond::stage_lid, o->force);
      const nlohmann::json j = elrond::io::load_json(cfg.out / elrond::artifact::kLid);
      std::cout << "LID " << j.at("lid").get<std::size_t>() << " (eps "
                << j.at("eps").get<double>() << ")\n";
    });
  }

  // stability
  {
    auto* sub = app.add_subcommand("stability", "subspace stability across subset sizes");
    auto o = add_common(sub);
    auto sizes = std::make_shared<std::vector<std::size_t>>();
    auto repeats = std::make_shared<std::size_t>(0);
    sub->add_option("--sizes", *sizes, "override stability.sizes");
    sub->add_option("--repeats", *repeats, "override stability.repeats");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--sizes")) cfg.stability_sizes = *sizes;
      if (sub->count("--repeats")) cfg.stability_repeats = *repeats;
      run_single_stage(cfg, "stability", elrond::stage_stability, o->force);
    });
  }

  // linearity
  {
    auto* sub = app.add_subcommand("linearity", "trajectory straightness between concepts");
    auto o = add_common(sub);
    auto traj = std::make_shared<std::size_t>(0);
    auto points = std::make_shared<std::size_t>(0);
    sub->add_option("--trajectories", *traj, "override linearity.trajectories");
    sub->add_option("--points", *points, "override linearity.points");
    sub->callback([=] {
      elrond::RunConfig cfg = load_cfg(*o, sub);
      if (sub->count("--trajectories")) cfg.linearity_trajectories = *traj;
      if (sub->count("--points")) cfg.linearity_points = *points;
      run_single_stage(cfg, "linearity", elrond::stage_linearity, o->force);
    });
  }

  // pipeline
  {
    auto* sub = app.add_subcommand("pipeline", "run every stage in order");
    auto o = add_common(sub);
    sub->callback([o, sub] {
      const elrond::RunConfig cfg = load_cfg(*o, sub);
      const elrond::PipelineSummary sum = elrond::run_pipeline(cfg, o->force);
      for (const auto& s : sum.ran) std::cout << "ran      " << s << "\n";
      for (const auto& s : sum.skipped) std::cout << "skipped  " << s << "\n";
      std::cout << "pipeline finished in " << sum.seconds << " s, manifest at "
                << elrond::manifest_path(cfg).string() << "\n";
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return rc;
}
