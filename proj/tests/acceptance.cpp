// Runs every acceptance criterion at its pinned tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero when a criterion fails,
// unless it is listed with --known-failures.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "oracles.hpp"
#include "pgl/commands.hpp"

using namespace pgl;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_pop(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2, 3, 4};
const std::vector<double> kAlphas{0.01, 0.03, 0.05, 0.07, 0.09};

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t checked = 0, bad = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelSpec spec;
    spec.architecture = std::array{Architecture::linear, Architecture::mlp, Architecture::tiny_conv}[trial % 3];
    spec.input_shape = {2 + rng.below(5), 2 + rng.below(5), 1 + rng.below(2)};
    spec.num_classes = 2 + rng.below(3);
    spec.hidden = {2 + rng.below(8)};
    if (rng.bernoulli(0.5)) spec.hidden.push_back(2 + rng.below(6));
    spec.conv_channels = {1 + rng.below(4)};
    spec.pooling = rng.bernoulli(0.5) ? Pooling::mean : Pooling::max;
    ToyModel model = oracle::random_model(spec, rng);
    Shape xs = spec.input_shape;
    xs.insert(xs.begin(), 1);
    const Tensor x = oracle::random_tensor(xs, rng);
    const std::size_t cls = rng.below(spec.num_classes);
    TapeScope scope;
    const Tensor g = input_gradient(model, x, cls, false);
    const auto fd = oracle::input_gradient_fd(model, x, cls, 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double err = std::abs(g[i] - fd[i]);
      const double tol = std::max(1e-5, 1e-3 * std::abs(fd[i]));
      worst = std::max(worst, err / tol);
      bad += err > tol;
      ++checked;
    }
  }

  ToyDatasetSpec ds;
  ds.height = ds.width = 8;
  ds.patch_size = 3;
  ds.background_block = 2;
  ds.n_train = 4;
  ds.n_test = 1;
  Dataset d = generate_image_dataset(ds).train;
  double worst_rel = 0.0;
  for (auto synthesis : {SynthesisMode::cutmix, SynthesisMode::simulated_edit}) {
    ModelSpec spec;
    spec.input_shape = {8, 8, 1};
    spec.conv_channels = {3};
    Rng init(11);
    ToyModel model = oracle::random_model(spec, init);
    TrainConfig cfg;
    cfg.synthesis = synthesis;
    cfg.alpha = 0.5;
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    Rng pr(5), mr(6);
    TapeScope scope;
    auto s = detail::synthesize_images(d, idx, cfg, pr, mr);
    auto loss = detail::batch_loss(model, s, cfg);
    std::vector<double> analytic;
    for (const auto& g : grad(loss.l_total, model.param_tensors())) {
      analytic.insert(analytic.end(), g.values().begin(), g.values().end());
    }
    const auto fd = oracle::total_loss_param_gradient_fd(model, s, cfg, 1e-5, 1e-5);
    worst_rel = std::max(worst_rel, oracle::relative_error(analytic, fd));
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && worst_rel < 1e-3 && secs < 120.0,
          std::to_string(bad) + "/" + std::to_string(checked) + " input-gradient entries out of tolerance (worst " +
              fmt(worst) + "x tol); L_total parameter gradient relative error " + fmt(worst_rel, 3) + " < 1e-3; " +
              fmt(secs, 3) + " s < 120 s"};
}

Verdict mask_algebra() {
  Rng rng(77);
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 2 + rng.below(15), w = 2 + rng.below(15), c = 1 + rng.below(3), n = 2 + rng.below(4);
    const Tensor a = oracle::random_tensor({h, w, c}, rng);
    std::vector<double> bv = oracle::random_tensor({h, w, c}, rng).values();
    for (std::size_t i = 0; i < bv.size(); ++i) {
      if (rng.bernoulli(0.1)) bv[i] = a[i];
    }
    const Tensor b({h, w, c}, bv);
    std::vector<double> ya(n, 0.0), yb(n, 0.0);
    ya[rng.below(n)] = 1.0;
    yb[rng.below(n)] = 1.0;
    SyntheticSample s = cutmix(a, ya, b, yb, rng);
    const Tensor& ia = s.masks[0].values();
    const Tensor& ib = s.masks[1].values();
    bool ok = true;
    for (std::size_t p = 0; p < h * w; ++p) {
      ok = ok && ia[p] + ib[p] == 1.0;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = p * c + k;
        if (a[i] == b[i]) continue;
        ok = ok && (s.x_tilde[i] == a[i]) == (ia[p] == 1.0) && (s.x_tilde[i] == b[i]) == (ib[p] == 1.0);
      }
    }
    bad += !ok;
  }
  const double soft = provenance_loss_soft(Tensor::vector({3, 2}), Tensor::vector({5, 7}), Tensor::vector({1, 0})).item();
  const double hard = provenance_loss_hard(Tensor::vector({4, 1, 2}), Tensor::vector({1, 0, 0})).item();
  return {bad == 0 && soft == 29.0 && hard == 5.0, std::to_string(bad) +
                                                      "/1000 cutmix cases with a provenance error; soft example = " +
                                                      fmt(soft) + " (29), hard example = " + fmt(hard) + " (5)"};
}

Verdict otsu_equivalence() {
  Rng rng(91);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v;
    const std::size_t clusters = 1 + rng.below(4);
    for (std::size_t c = 0; c < clusters; ++c) {
      const double centre = rng.uniform(-2.0, 2.0), spread = rng.uniform(0.0, 0.5);
      const std::size_t count = 1 + rng.below(100);
      for (std::size_t i = 0; i < count; ++i) v.push_back(centre + spread * rng.normal());
    }
    if (trial % 4 == 0) {
      for (auto& x : v) x = std::round(x * 20.0);
    }
    v.push_back(v.front() + 1.0);
    const std::size_t bins = trial % 5 == 0 ? 2 + rng.below(30) : 256;
    mismatches += otsu_threshold(v, bins) != oracle::otsu_bruteforce(v, bins);
  }
  return {mismatches == 0, std::to_string(mismatches) + "/200 histograms where the threshold differs from exhaustive search"};
}

Verdict diff_mask_recovery() {
  ToyDatasetSpec spec;
  spec.n_train = 100;
  spec.n_test = 1;
  spec.seed = 5;
  Dataset d = generate_image_dataset(spec).train;
  bool pass = true;
  std::string detail;
  for (double amplitude : {0.5, 0.75, 1.0}) {
    Rng rng(31);
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      EditResult e = simulated_edit(d.sample(i), d.target_mask(i), amplitude, rng);
      const Tensor recovered = diff_mask(d.sample(i), e.x_edited).mask.complement().values();
      double inter = 0.0, uni = 0.0;
      for (std::size_t p = 0; p < recovered.numel(); ++p) {
        inter += recovered[p] == 1.0 && e.true_edit_region[p] == 1.0;
        uni += recovered[p] == 1.0 || e.true_edit_region[p] == 1.0;
      }
      total += uni == 0.0 ? 1.0 : inter / uni;
    }
    const double iou = total / static_cast<double>(d.size());
    pass = pass && iou >= 0.95;
    detail += (detail.empty() ? "" : ", ") + std::string("amplitude ") + fmt(amplitude) + ": mean IoU " + fmt(iou);
  }
  return {pass, detail + " (need >= 0.95, 100 samples)"};
}

// ---------------------------------------------------------------------------
// Training-based criteria share one cache of toy runs.

struct RunKey {
  double alpha;
  MaskMode mode;
  double perturbation;
  std::uint64_t seed;
  auto operator<=>(const RunKey&) const = default;
};

class Runs {
 public:
  const TrainResult& get(const RunKey& k) {
    auto it = cache_.find(k);
    if (it != cache_.end()) return it->second;
    ExperimentConfig c;
    c.seed = k.seed;
    c.train.alpha = k.alpha;
    c.train.mask_mode = k.mode;
    c.train.mask_perturbation = k.perturbation;
    resolve_model_shape(c);
    const auto t0 = Clock::now();
    TrainResult r = run_experiment(c);
    const auto& f = r.history.back();
    std::cerr << "  run alpha=" << k.alpha << " mask=" << to_string(k.mode) << " perturbation=" << k.perturbation
              << " seed=" << k.seed << ": acc " << fmt(f.test_accuracy) << ", worst-group " << fmt(f.worst_group_accuracy)
              << ", grad mass " << fmt(f.grad_mass) << ", box " << fmt(f.box->mean) << " (" << fmt(seconds_since(t0), 3)
              << " s)\n";
    return cache_.emplace(k, std::move(r)).first->second;
  }

  std::vector<double> final_metric(double alpha, MaskMode mode, double perturbation, double EpochMetrics::*field) {
    std::vector<double> v;
    for (auto s : kSeeds) v.push_back(get({alpha, mode, perturbation, s}).history.back().*field);
    return v;
  }

  std::vector<double> box_mean(double alpha) {
    std::vector<double> v;
    for (auto s : kSeeds) v.push_back(get({alpha, MaskMode::provenance, 0.0, s}).history.back().box->mean);
    return v;
  }

 private:
  std::map<RunKey, TrainResult> cache_;
};

// Per-seed ordering: strictly better, or both at the 1.0 ceiling.
bool beats(double ours, double theirs) { return ours > theirs || (ours == 1.0 && theirs == 1.0); }

Verdict spurious_suppression(Runs& runs, double& best_alpha) {
  const auto t0 = Clock::now();
  const auto mass = &EpochMetrics::grad_mass;
  const auto wga = &EpochMetrics::worst_group_accuracy;
  best_alpha = kAlphas.front();
  double best_mass = -1.0;
  for (double a : kAlphas) {
    const double m = mean(runs.final_metric(a, MaskMode::provenance, 0.0, mass));
    if (m > best_mass) {
      best_mass = m;
      best_alpha = a;
    }
  }
  const auto ours_mass = runs.final_metric(best_alpha, MaskMode::provenance, 0.0, mass);
  const auto ours_wga = runs.final_metric(best_alpha, MaskMode::provenance, 0.0, wga);
  struct Baseline {
    std::string name;
    std::vector<double> mass, wga;
  };
  std::vector<Baseline> baselines{
      {"alpha=0", runs.final_metric(0.0, MaskMode::provenance, 0.0, mass),
       runs.final_metric(0.0, MaskMode::provenance, 0.0, wga)},
      {"random mask", runs.final_metric(best_alpha, MaskMode::random, 0.0, mass),
       runs.final_metric(best_alpha, MaskMode::random, 0.0, wga)}};
  bool pass = true;
  std::string detail = "best alpha " + fmt(best_alpha) + ": grad mass " + fmt(mean(ours_mass)) + ", worst-group " +
                       fmt(mean(ours_wga));
  for (const auto& b : baselines) {
    std::size_t mass_seeds = 0, wga_seeds = 0, ties = 0;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) {
      mass_seeds += beats(ours_mass[i], b.mass[i]);
      wga_seeds += beats(ours_wga[i], b.wga[i]);
      ties += ours_wga[i] == 1.0 && b.wga[i] == 1.0;
    }
    const bool ok = mean(ours_mass) > mean(b.mass) && mean(ours_wga) > mean(b.wga) && mass_seeds >= 4 && wga_seeds >= 4;
    pass = pass && ok;
    detail += "; vs " + b.name + " (mass " + fmt(mean(b.mass)) + ", worst-group " + fmt(mean(b.wga)) +
              "): ordering on " + std::to_string(mass_seeds) + "/5 and " + std::to_string(wga_seeds) + "/5 seeds (" + std::to_string(ties) + " worst-group ties at 1.0)";
  }
  const double secs = seconds_since(t0);
  return {pass && secs < 1800.0, detail + "; " + fmt(secs, 4) + " s < 1800 s"};
}

Verdict alpha_robustness(Runs& runs) {
  const double base = mean(runs.box_mean(0.0));
  std::vector<double> acc;
  for (double a : kAlphas) acc.push_back(mean(runs.box_mean(a)));
  const double sd = std_pop(acc);
  bool above = true, smooth = true;
  std::string detail = "alpha=0: " + fmt(base) + "; sweep:";
  for (std::size_t i = 0; i < acc.size(); ++i) {
    above = above && acc[i] > base;
    std::vector<double> nb;
    if (i > 0) nb.push_back(acc[i - 1]);
    if (i + 1 < acc.size()) nb.push_back(acc[i + 1]);
    smooth = smooth && std::abs(acc[i] - mean(nb)) <= 2.0 * sd;
    detail += " " + fmt(kAlphas[i]) + "->" + fmt(acc[i]);
  }
  return {above && smooth, detail + "; every alpha above baseline: " + (above ? "yes" : "no") +
                               "; no spike beyond 2x std " + fmt(sd) + ": " + (smooth ? "yes" : "no")};
}

Verdict mask_noise_robustness(Runs& runs, double alpha) {
  const auto acc = &EpochMetrics::test_accuracy;
  const double reference = mean(runs.final_metric(alpha, MaskMode::provenance, 0.0, acc));
  bool pass = true;
  std::string detail = "alpha " + fmt(alpha) + ", unperturbed accuracy " + fmt(reference) + "; drops (pp):";
  for (double d : {0.10, 0.30, -0.10, -0.30}) {
    const double drop = 100.0 * (reference - mean(runs.final_metric(alpha, MaskMode::provenance, d, acc)));
    pass = pass && drop <= 2.0;
    detail += std::string(" ") + (d > 0 ? "+" : "") + fmt(100 * d) + "% -> " + fmt(drop, 3);
  }
  return {pass, detail + " (limit 2 pp)"};
}

Verdict pg_minimization(Runs& runs) {
  const ExperimentConfig defaults;
  const auto& h = runs.get({defaults.train.alpha, MaskMode::provenance, 0.0, defaults.seed}).history;
  const double first = h.front().l_pg, last = h.back().l_pg;
  return {last < 0.5 * first, "default toy run (alpha " + fmt(defaults.train.alpha) + "): epoch-0 L_PG " + fmt(first) +
                                  ", final " + fmt(last) + ", ratio " + fmt(last / first) + " < 0.5"};
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / "pgl_acceptance_determinism";
  fs::remove_all(root);
  for (const char* name : {"a", "b"}) {
    const std::string cmd = std::string("'") + PGL_CLI_PATH + "' train --out '" + (root / name).string() + "' > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "cmd_train exited with an error"};
  }
  const std::string a = read_file(root / "a" / "metrics.csv"), b = read_file(root / "b" / "metrics.csv");
  fs::remove_all(root);
  return {a == b && !a.empty(), "two default cmd_train runs: metrics.csv " + std::to_string(a.size()) + " bytes, " +
                                    (a == b ? "byte-identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> known;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--known-failures" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) known.insert(std::stoi(tok));
    }
  }
  setvbuf(stdout, nullptr, _IOLBF, 0);
  int unexpected = 0;
  auto report = [&](int n, const Verdict& v) {
    std::string line = (v.pass ? "PASS" : "FAIL") + std::string(" criterion ") + std::to_string(n) + ": " + v.detail;
    if (!v.pass && known.contains(n)) line += " [known failure]";
    if (!v.pass && !known.contains(n)) ++unexpected;
    std::cout << line << std::endl;
  };
  auto guarded = [](auto&& f) -> Verdict {
    try {
      return f();
    } catch (const std::exception& e) {
      return {false, std::string("error: ") + e.what()};
    }
  };

  report(1, guarded(gradient_correctness));
  report(2, guarded(mask_algebra));
  report(3, guarded(otsu_equivalence));
  report(4, guarded(diff_mask_recovery));
  Runs runs;
  double best_alpha = ExperimentConfig{}.train.alpha;
  report(5, guarded([&] { return spurious_suppression(runs, best_alpha); }));
  report(6, guarded([&] { return alpha_robustness(runs); }));
  report(7, guarded([&] { return mask_noise_robustness(runs, best_alpha); }));
  report(8, guarded([&] { return pg_minimization(runs); }));
  report(9, guarded(determinism));
  return unexpected == 0 ? 0 : 1;
}
