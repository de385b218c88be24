#include "polyprobe/model/model_io.hpp"

#include "polyprobe/core/error.hpp"

namespace polyprobe::model {

core::Checkpoint to_checkpoint(const Transformer& model) {
  core::Checkpoint ckpt;
  ckpt.header = {{"kind", "transformer"}, {"config", model.config}};
  model.params.visit([&](const std::string& name, const Tensor& t) { ckpt.tensors.emplace_back(name, t); });
  return ckpt;
}

Transformer model_from_checkpoint(const core::Checkpoint& ckpt) {
  require(ckpt.header.value("kind", std::string()) == "transformer", ErrorCode::CorruptFile,
          "checkpoint does not hold a transformer");
  ModelConfig cfg;
  try {
    cfg = ckpt.header.at("config").get<ModelConfig>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("bad model config: ") + e.what());
  }
  // The shapes come from a freshly initialised model of the same config.
  Transformer model = init_model(cfg);
  model.params.visit([&](const std::string& name, Tensor& t) {
    const Tensor& stored = ckpt.tensor(name);
    if (stored.shape() != t.shape()) {
      fail(ErrorCode::CorruptFile, "tensor '" + name + "' has the wrong shape");
    }
    t = stored;
  });
  return model;
}

void save_model(const std::filesystem::path& path, const Transformer& model) {
  core::save_checkpoint(path, to_checkpoint(model));
}

Transformer load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(core::load_checkpoint(path));
}

}  // namespace polyprobe::model
