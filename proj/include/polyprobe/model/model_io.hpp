#pragma once

#include <filesystem>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/model/transformer.hpp"

namespace polyprobe::model {

core::Checkpoint to_checkpoint(const Transformer& model);
// Throws CorruptFile when the header is not a model or a tensor is missing or
// has the wrong shape.
Transformer model_from_checkpoint(const core::Checkpoint& ckpt);

void save_model(const std::filesystem::path& path, const Transformer& model);
Transformer load_model(const std::filesystem::path& path);

}  // namespace polyprobe::model
