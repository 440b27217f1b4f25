#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "canvit/distill.hpp"
#include "canvit/model.hpp"

namespace canvit {

// Binary container: "CVIT" magic, u32 version, key=value config entries,
// named tensor directory (name, dims, dtype tag, little-endian payload).
// Writing is canonical (fixed entry order, shortest round-trip floats), so
// save -> load -> save is byte-identical.
struct CheckpointData {
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const CheckpointData& ck, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

// Config text <-> structs. Keys are prefixed (model. / train. / teacher.);
// apply_config rejects keys outside the documented schema.
std::vector<std::pair<std::string, std::string>> model_config_to_kv(const ModelConfig& cfg);

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t teacher_seed = 7;
};

void apply_config(const std::vector<std::pair<std::string, std::string>>& kv, RunConfig& cfg);

// A trained artifact: parameters plus (after training) the frozen teacher
// identity and the target standardization stats, so later rollouts can
// report losses against the same targets.
struct ModelBundle {
    ModelParams params;
    bool has_teacher = false;
    SyntheticTeacher teacher;
    StandardizationStats stats;
};

void save_model(const ModelBundle& b, const std::string& path);
ModelBundle load_model(const std::string& path);

}  // namespace canvit
