#pragma once

#include "vitdec/align.hpp"
#include "vitdec/attribution.hpp"
#include "vitdec/decompose.hpp"
#include "vitdec/model.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace vitdec {

// Artifact container: 8-byte magic, u64 header length, JSON header,
// raw little-endian float32 blob. The config hash covers the canonical
// config plus the blob bytes; timestamps live outside the hashed region.

std::string config_hash(const nlohmann::json& config, const std::vector<float>& blob);

void write_artifact(const std::string& path, const std::string& kind, nlohmann::json config,
                    nlohmann::json extra, const std::vector<float>& blob);

struct RawArtifact {
    nlohmann::json header;
    std::vector<float> blob;
};

/// Validates magic, header and config hash; throws ValidationError on any
/// mismatch (corrupt or wrong-kind artifact).
RawArtifact read_artifact(const std::string& path, const std::string& expect_kind);

/// Atomic JSON writers for the report-style artifacts.
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_model(const ToyModel& model, const PrototypeTable& prototypes, nlohmann::json config,
                nlohmann::json metrics, const std::string& path);

struct ModelArtifact {
    ToyModel model;
    PrototypeTable prototypes;
    nlohmann::json header;
};
ModelArtifact load_model(const std::string& path);

void save_decomposition_set(const DecompositionSet& set, nlohmann::json config, const std::string& path);
/// Re-checks the reconstruction identity on load (NumericError on failure).
DecompositionSet load_decomposition_set(const std::string& path);

void save_aligner(const Aligner& aligner, nlohmann::json config, const std::string& path);
Aligner load_aligner(const std::string& path);

/// Score matrices are plain JSON files.
void save_scores(const ScoreMatrix& scores, nlohmann::json config, const std::string& path);
ScoreMatrix load_scores(const std::string& path);

} // namespace vitdec
