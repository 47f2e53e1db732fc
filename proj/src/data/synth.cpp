#include "volformer/data/synth.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <numeric>

#include "volformer/error.hpp"
#include "volformer/rng.hpp"

namespace volformer::data {

namespace {

template <std::size_t N>
std::size_t pick(Rng& rng, const std::array<double, N>& weights) {
  double total = 0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < N; ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return N - 1;
}

std::string subject_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "S%05zu", i);
  return buf;
}

// Grade trajectory consistent with the planted class: the first qualifying
// increase lands at the event month, KL0 knees may drift to KL1 without it
// counting, and intermediate visits go missing at random.
std::map<int, int> trajectory(Rng& rng, int cls, int baseline, const cohort::VisitGrid& grid, int& event_month) {
  std::vector<int> fast_months, slow_months;
  for (int m : grid.months) {
    if (m > 0 && m <= grid.fast_horizon) fast_months.push_back(m);
    if (m > grid.fast_horizon && m <= grid.slow_horizon) slow_months.push_back(m);
  }
  event_month = -1;
  if (cls == cohort::fast) event_month = fast_months[rng.below(fast_months.size())];
  if (cls == cohort::slow) event_month = slow_months[rng.below(slow_months.size())];
  const int drift = baseline == 0 && rng.uniform() < 0.3 ? grid.months[1 + rng.below(grid.months.size() - 1)] : -1;
  const int raised = baseline == 0 ? 2 : baseline + 1;

  std::map<int, int> out;
  for (int m : grid.months) {
    int g = baseline;
    if (drift >= 0 && m >= drift) g = 1;
    if (event_month >= 0 && m >= event_month) g = raised;
    const bool keep = m == 0 || m == event_month || m == grid.slow_horizon || rng.uniform() >= 0.1;
    if (keep) out[m] = g;
  }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  double total = 0;
  for (double p : class_proportions) {
    if (!(p >= 0)) throw ConfigError("synth: class proportions must be non-negative");
    total += p;
  }
  if (!(total > 0)) throw ConfigError("synth: class proportions sum to zero");
  if (institutions.empty()) throw ConfigError("synth: no institutions");
  for (const auto& [name, share] : institutions)
    if (name.empty() || !(share > 0)) throw ConfigError("synth: institution shares must be positive");
  const double rates = rate_missing_klg + rate_klg4_baseline + rate_tka_baseline + rate_missing_bmi + rate_missing_mri +
                       rate_indeterminate;
  for (double r : {rate_missing_klg, rate_klg4_baseline, rate_tka_baseline, rate_missing_bmi, rate_missing_mri,
                   rate_indeterminate})
    if (!(r >= 0)) throw ConfigError("synth: exclusion rates must be non-negative");
  if (!(rates < 1)) throw ConfigError("synth: exclusion rates must sum below 1");
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 2 || !(spacing[a] > 0)) throw ConfigError("synth: volume geometry must be positive");
  if (!(noise_sd >= 0)) throw ConfigError("synth: noise_sd must be non-negative");
}

double cartilage_thickness(int cls) { return 0.25 * (1.0 - 0.35 * cls); }

std::vector<SynthKnee> synth_generate(std::size_t n_subjects, std::uint64_t seed, const SynthConfig& cfg) {
  if (n_subjects == 0) throw ConfigError("synth: need at least one subject");
  cfg.validate();
  const cohort::VisitGrid grid;
  std::vector<double> inst_weights;
  for (const auto& [_, w] : cfg.institutions) inst_weights.push_back(w);

  std::vector<SynthKnee> out;
  out.reserve(2 * n_subjects);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    Rng rng(Rng::mix(seed ^ Rng::mix(s + 1)));
    double u = rng.uniform() * std::accumulate(inst_weights.begin(), inst_weights.end(), 0.0);
    std::size_t inst = 0;
    while (inst + 1 < inst_weights.size() && u >= inst_weights[inst]) u -= inst_weights[inst++];
    const double age = std::round(rng.uniform(45, 79) * 10) / 10;
    const char sex = rng.uniform() < 0.58 ? 'F' : 'M';
    const double bmi = std::round(std::clamp(rng.normal(28.6, 4.8), 17.0, 48.0) * 10) / 10;

    for (char side : {'R', 'L'}) {
      SynthKnee k;
      auto& r = k.record;
      r.subject_id = subject_name(s);
      r.side = side;
      r.institution_id = cfg.institutions[inst].first;
      r.age = age;
      r.sex = sex;
      r.bmi = bmi;
      k.planted_class = static_cast<int>(pick(rng, cfg.class_proportions));
      const int baseline = static_cast<int>(pick(rng, std::array<double, 4>{0.40, 0.27, 0.20, 0.13}));
      int event = -1;
      r.klg_by_month = trajectory(rng, k.planted_class, baseline, grid, event);

      const std::array<double, 6> rates{cfg.rate_missing_klg, cfg.rate_klg4_baseline, cfg.rate_tka_baseline,
                                        cfg.rate_missing_bmi, cfg.rate_missing_mri, cfg.rate_indeterminate};
      double v = rng.uniform();
      for (std::size_t e = 0; e < rates.size(); ++e) {
        if (v < rates[e]) {
          k.planted_exclusion = cohort::kExclusionReasons[e];
          break;
        }
        v -= rates[e];
      }
      const auto& ex = k.planted_exclusion;
      if (ex == "missing_klg") r.klg_by_month.erase(0);
      if (ex == "klg4_baseline")
        for (auto& [_, g] : r.klg_by_month) g = 4;
      if (ex == "tka_baseline") r.tka_baseline = true;
      if (ex == "missing_bmi") r.bmi.reset();
      if (ex == "missing_mri") r.has_mri = false;
      if (ex == "indeterminate_label") {
        // Censor before the event (or before the final visit without one).
        const int cut = event >= 0 ? event : grid.slow_horizon;
        std::erase_if(r.klg_by_month, [cut](const auto& kv) { return kv.first >= cut; });
      }

      auto& p = k.phantom;
      p.cls = k.planted_class;
      p.left = side == 'L';
      auto jitter = [&](double c) { return c + rng.uniform(-0.04, 0.04); };
      auto scaled = [&](double r0) { return r0 * rng.uniform(0.93, 1.07); };
      p.femur_center = {jitter(0.5), jitter(0.0), jitter(0.06)};
      p.femur_radii = {scaled(0.40), scaled(0.60), scaled(0.70)};
      p.tibia_center = {jitter(-0.5), jitter(0.0), jitter(0.0)};
      p.tibia_radii = {scaled(0.38), scaled(0.62), scaled(0.75)};
      p.cartilage = cartilage_thickness(p.cls) * rng.uniform(0.9, 1.1);
      p.gain = rng.uniform(0.9, 1.1);
      p.noise_seed = rng.next_u64();
      out.push_back(std::move(k));
    }
  }
  return out;
}

Volume render_phantom(const SynthKnee& knee, const SynthConfig& cfg) {
  cfg.validate();
  const auto& p = knee.phantom;
  Volume v;
  v.dims = cfg.dims;
  v.spacing = cfg.spacing;
  v.dtype = DType::f32;
  v.layout = View::sag;
  v.id = knee.record.knee_id();
  v.voxels.resize(v.size());
  Rng noise(p.noise_seed);

  auto coord = [](std::size_t i, std::size_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2 - 1; };
  auto radial = [](const std::array<double, 3>& u, const std::array<double, 3>& c, const std::array<double, 3>& r) {
    double e = 0;
    for (int a = 0; a < 3; ++a) e += ((u[a] - c[a]) / r[a]) * ((u[a] - c[a]) / r[a]);
    return std::sqrt(e);
  };
  std::size_t idx = 0;
  for (std::size_t i = 0; i < v.dims[0]; ++i)
    for (std::size_t j = 0; j < v.dims[1]; ++j)
      for (std::size_t k = 0; k < v.dims[2]; ++k) {
        std::array<double, 3> u{coord(i, v.dims[0]), coord(j, v.dims[1]), coord(k, v.dims[2])};
        if (p.left) u[2] = -u[2];
        const double ef = radial(u, p.femur_center, p.femur_radii);
        const double et = radial(u, p.tibia_center, p.tibia_radii);
        double value = 30;
        if (ef < 1 || et < 1) {
          value = 110;
        } else if ((ef < 1 + p.cartilage && u[0] < p.femur_center[0]) ||
                   (et < 1 + p.cartilage && u[0] > p.tibia_center[0])) {
          value = 210;  // articular cartilage on the joint-facing surfaces
        }
        v.voxels[idx++] = static_cast<float>(value * p.gain + cfg.noise_sd * noise.normal());
      }
  return v;
}

}  // namespace volformer::data
