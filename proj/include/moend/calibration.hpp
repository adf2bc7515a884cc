// Copyright 2026 The MoE-nD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "moend/compression_config.hpp"
#include "moend/eviction.hpp"
#include "moend/toy_model.hpp"

namespace moend::calib {

enum class Metric { kL2Proxy, kKl };

/// Accepts "l2", "l2_proxy" and "kl".
Metric parse_metric(std::string_view name);
std::string_view metric_name(Metric metric);

/// Ordered candidate configurations. Column c of a sensitivity table
/// refers to configs[c].
struct ConfigSpace {
    std::string name;
    std::vector<LayerCompressionConfig> configs;

    /// All 6 x 3 x 3 tuples, keep descending then K bits then V bits (16, 8, 4);
    /// the identity config is column 0.
    static ConfigSpace full();
    /// Identity plus the nine single-axis operations of the per-op
    /// heterogeneity study.
    static ConfigSpace table2();
    /// table2 plus (1.0, k8, v4): the eleven-config validation set.
    static ConfigSpace calib11();
    /// "full", "table2" or "calib11"; ConfigError otherwise.
    static ConfigSpace by_name(std::string_view name);

    std::size_t size() const { return configs.size(); }
    std::optional<std::size_t> index_of(const LayerCompressionConfig& config) const;
    std::size_t identity_index() const;
};

/// A single-axis operation and the config column that realizes it.
struct NamedOp {
    std::string name;
    LayerCompressionConfig config;
};

/// evict_10 .. evict_90 (keep ratio = the percentage), k_quant_8/4, v_quant_8/4.
std::vector<NamedOp> table2_ops();

/// L x |C| matrix of per-layer per-config sensitivities.
struct SensitivityTable {
    std::size_t num_layers = 0;
    ConfigSpace space;
    std::vector<double> scores;  // row-major [layer][config]
    std::string model_spec_hash;
    std::string prompt_id;
    eviction::ScorerKind scorer = eviction::ScorerKind::kRandomPerm;
    Metric metric = Metric::kL2Proxy;
    std::uint64_t seed = 0;

    double at(std::size_t layer, std::size_t config) const { return scores[layer * space.size() + config]; }
    double& at(std::size_t layer, std::size_t config) { return scores[layer * space.size() + config]; }

    /// Throws FormatError if the shape is wrong, a cell is negative or
    /// non-finite, or the identity column exceeds 1e-7.
    void validate() const;
};

enum class Composition {
    kDirect,    ///< measure every tuple
    kAdditive,  ///< S(keep,k,v) = S(keep,16,16) + S(1,k,16) + S(1,16,v)
};

struct CalibrationOptions {
    eviction::ScorerKind scorer = eviction::ScorerKind::kRandomPerm;
    std::uint64_t seed = 0;
    std::size_t v_group_size = quant::kDefaultGroupSize;
    /// Worker threads for cell evaluation; 0 uses hardware concurrency.
    std::size_t threads = 1;
    Composition composition = Composition::kDirect;
    std::string prompt_id = "desk-prompt-27";
};

/// Eviction seed used for layer `layer` of a table created with `seed`.
/// Shared by every config of the layer so retained sets nest across keep ratios.
std::uint64_t layer_scorer_seed(std::uint64_t seed, std::size_t layer);

/// Mean over token positions of ||a_t - b_t|| / ||a_t||. A zero-norm
/// reference row contributes 0 if b_t matches it and throws CalibrationError otherwise.
double relative_l2(const Tensor& reference, const Tensor& perturbed);

/// KL(p || q) in nats for probability vectors.
double kl_divergence(std::span<const double> p, std::span<const double> q);
/// KL(softmax(reference) || softmax(other)).
double kl_from_logits(std::span<const float> reference, std::span<const float> other);

/// Relative attention-output L2 error of each layer under each config
/// applied to that layer alone, on a single prompt (length >= 2).
SensitivityTable calibrate_l2(const ToyModel& model, std::span<const TokenId> prompt, const ConfigSpace& space,
                              const CalibrationOptions& options);

/// Mean next-token KL(full || perturbed) over all positions of every held-out sequence.
SensitivityTable calibrate_kl(const ToyModel& model, const std::vector<std::vector<TokenId>>& heldout,
                              const ConfigSpace& space, const CalibrationOptions& options);

/// Seeded uniform random held-out sequences.
std::vector<std::vector<TokenId>> heldout_sequences(const ModelSpec& spec, std::size_t count, std::size_t length,
                                                    std::uint64_t seed);

/// Pearson / Spearman coefficient, or nullopt when either input is constant.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct CorrelationReport {
    /// Per layer, over configs (identity column excluded).
    std::vector<std::optional<double>> layer_pearson;
    std::vector<std::optional<double>> layer_spearman;
    /// Per config, over layers (identity column excluded).
    std::vector<std::string> config_ids;
    std::vector<std::optional<double>> config_pearson;
    std::optional<double> mean_layer_pearson;
    std::optional<double> mean_layer_spearman;
    std::optional<double> mean_config_pearson;
};

/// Throws InputError unless both tables have the same layers and config columns.
CorrelationReport correlate(const SensitivityTable& a, const SensitivityTable& b);

struct OpStats {
    std::string op;
    LayerCompressionConfig config;
    double min = 0.0;
    double max = 0.0;
    /// max / min; +infinity when min is below 1e-12.
    double ratio = 0.0;
};

/// Min / max / ratio over layers for each op whose config is in the table.
std::vector<OpStats> heterogeneity_stats(const SensitivityTable& table, const std::vector<NamedOp>& ops);

nlohmann::json to_json(const SensitivityTable& table);
SensitivityTable table_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CorrelationReport& report);
nlohmann::json to_json(const std::vector<OpStats>& stats);

void save_table(const std::filesystem::path& path, const SensitivityTable& table);
/// Throws FormatError on malformed files and StaleCalibrationError when
/// `expected_model_hash` is given and differs from the stored hash.
SensitivityTable load_table(const std::filesystem::path& path,
                            const std::optional<std::string>& expected_model_hash = std::nullopt);
/// Columns: layer, config_id, keep, k_bits, v_bits, score.
void write_table_csv(const std::filesystem::path& path, const SensitivityTable& table);

}  // namespace moend::calib
