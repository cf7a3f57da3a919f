// SPDX-License-Identifier: Apache-2.0
//
// Counterfactual experiment generation: do-operations, the identifiability
// and counterfactuality rejection tests, confounder balancing and the
// epsilon threshold sweep.
#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "cfphys/error.hpp"
#include "cfphys/sim2d.hpp"

namespace cfphys::bench {

enum class Scenario { balls, collision };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

struct ScenarioConfig {
    Scenario scenario = Scenario::balls;
    int n_objects = 3;
    double duration = 3.0;
    double fps = 25.0;
    double radius_min = 0.03;
    double radius_max = 0.08;
    double speed_min = 0.2;
    double speed_max = 0.6;
    /// Shift do-operations displace a body by a distance in [shift_min, shift_max].
    double shift_min = 0.05;
    double shift_max = 0.25;
    int max_do_trials = 100;
    int max_placement_tries = 100;
    int max_scene_tries = 1000;
    /// Scene A is only kept if every body takes part in at least one
    /// body-body collision during AB under the sampled masses.
    bool require_contacts = true;
    std::vector<double> mass_alphabet{1.0, 10.0};
};

/// Throws UsageError naming the offending field.
void validate(const ScenarioConfig& cfg);

struct ConfounderSet {
    std::vector<double> masses;
    std::vector<sim::Vec2> initial_velocities;
    bool operator==(const ConfounderSet&) const = default;
};

enum class DoKind { remove, shift };
std::string to_string(DoKind k);
DoKind do_kind_from_string(const std::string& name);

struct DoOperation {
    DoKind kind = DoKind::shift;
    std::size_t target = 0;
    sim::Vec2 delta;
    bool operator==(const DoOperation&) const = default;
};

/// Raised when no valid do-operation placement exists for a scene.
class DoOpError : public Error {
public:
    using Error::Error;
};

/// Applies the intervention. Bodies keep their visual_id, which is also
/// their index in scene A.
sim::Scene apply_do(const sim::Scene& scene_a, const DoOperation& op);

/// Masses of the bodies present in `scene`, looked up by visual_id.
std::vector<double> restrict_masses(const sim::Scene& scene, const std::vector<double>& masses);

struct Experiment {
    std::string id;
    Scenario scenario = Scenario::balls;
    std::uint64_t seed = 0;
    double duration = 0.0;
    double fps = 0.0;
    double eps = 0.0;
    sim::Scene scene_a;
    sim::Trajectory traj_ab;
    DoOperation do_op;
    sim::Scene scene_c;
    sim::Trajectory traj_cd;
    ConfounderSet confounders;
    /// Bodies (scene A indices) whose mass flip changes CD by >= eps.
    std::vector<std::size_t> consequential;
    bool operator==(const Experiment&) const = default;
};

/// Sum over frames and bodies of the Euclidean position gap.
double traj_distance(const sim::Trajectory& t1, const sim::Trajectory& t2);

struct IdentifiabilityResult {
    bool identifiable = true;
    /// Offending alternative masses when not identifiable.
    std::optional<std::vector<double>> witness;
};

struct CounterfactualityResult {
    bool counterfactual = false;
    std::vector<std::size_t> consequential;
};

/// Largest number of mass combinations the enumeration will attempt.
inline constexpr std::size_t kMaxCombinations = 64;

/// All mass assignments over the alphabet, in lexicographic order of
/// alphabet indices (first body most significant).
std::vector<std::vector<double>> enumerate_masses(std::size_t n_bodies, const std::vector<double>& alphabet);

IdentifiabilityResult identifiability_test(const sim::Scene& scene_a, const sim::Scene& scene_c,
                                           const ConfounderSet& z, double eps, const ScenarioConfig& cfg);

CounterfactualityResult counterfactuality_test(const sim::Scene& scene_c, const ConfounderSet& z, double eps,
                                               const ScenarioConfig& cfg);

/// Confounder-combination counts. Thread-safe.
class BalanceLedger {
public:
    BalanceLedger(std::size_t n_bodies, const std::vector<double>& alphabet);
    BalanceLedger(const BalanceLedger& other);

    /// Least-populated combination, ties broken by lowest index.
    std::size_t next_combination() const;
    void record(std::size_t combination);
    std::vector<double> masses(std::size_t combination) const;
    std::size_t combination_of(const std::vector<double>& masses) const;
    std::vector<std::size_t> counts() const;
    std::size_t total() const;
    /// max / min over cells; infinity while some cell is empty.
    double imbalance() const;

private:
    std::vector<std::vector<double>> combos_;
    std::vector<double> alphabet_;
    std::vector<std::size_t> counts_;
    mutable std::mutex mutex_;
};

sim::Scene sample_scene(const ScenarioConfig& cfg, std::mt19937_64& rng);

DoOperation sample_do_operation(const sim::Scene& scene_a, const ScenarioConfig& cfg, std::mt19937_64& rng);

struct FilterOptions {
    bool identifiability = true;
    bool counterfactuality = true;
};

struct Rejection {
    /// One of "identifiability", "counterfactuality", "no-valid-do-op".
    std::string reason;
    /// Per-trial failures observed before giving up.
    std::map<std::string, std::size_t> trial_failures;
};

using GenerationOutcome = std::variant<Experiment, Rejection>;

/// One pass of the generation loop for the ledger's least-populated mass
/// combination. Does not modify the ledger.
GenerationOutcome generate_experiment(const ScenarioConfig& cfg, double eps, const BalanceLedger& ledger,
                                      std::uint64_t seed, const FilterOptions& filters = {});

struct GenerationStats {
    std::size_t attempts = 0;
    std::map<std::string, std::size_t> rejections;
};

struct Dataset {
    ScenarioConfig config;
    double eps = 0.0;
    std::uint64_t seed = 0;
    std::vector<Experiment> experiments;
    GenerationStats stats;
    std::vector<std::size_t> cell_counts;
};

/// Generates `count` accepted experiments. The output depends only on
/// (cfg, eps, count, seed, filters) and not on the worker count.
Dataset generate_dataset(const ScenarioConfig& cfg, double eps, std::size_t count, std::uint64_t seed,
                         const FilterOptions& filters = {}, unsigned workers = 1);

struct SweepRow {
    double eps = 0.0;
    double rejection_pct = 0.0;
};

/// Rejection percentage of the identifiability test over n_samples
/// unfiltered candidates for each threshold of the grid.
std::vector<SweepRow> threshold_sweep(const ScenarioConfig& cfg, const std::vector<double>& eps_grid,
                                      std::size_t n_samples, std::uint64_t seed);

/// Grid value with the highest rejection (first on ties).
double best_threshold(const std::vector<SweepRow>& rows);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

} // namespace cfphys::bench
