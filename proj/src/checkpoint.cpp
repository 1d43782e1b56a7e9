#include <fstream>

#include "b2p/error.hpp"
#include "b2p/safetensors.hpp"
#include "b2p/trainer.hpp"
#include "json.hpp"

namespace b2p {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& path, const TrainingConfig& cfg,
                     const CheckpointMeta& meta, const Student& model, const EmaState* ema) {
  std::vector<std::string> names;
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  const auto& state = model.state();
  for (const auto* p : state) tensors.emplace_back("model/" + p->name, &p->value);
  if (ema) {
    if (ema->shadow().size() != state.size()) throw ValidationError("EMA does not match model layout");
    for (std::size_t k = 0; k < state.size(); ++k)
      tensors.emplace_back("ema/" + state[k]->name, &ema->shadow()[k]);
  }
  json m = {{"step", meta.step},
            {"epoch", meta.epoch},
            {"metric_name", meta.metric_name},
            {"metric", meta.metric ? json(*meta.metric) : json(nullptr)},
            {"config_hash", meta.config_hash},
            {"teacher_fingerprint", meta.teacher_fingerprint}};
  std::map<std::string, std::string> header{{"format", kCheckpointFormat},
                                            {"version", std::to_string(kCheckpointVersion)},
                                            {"config", config_to_json(cfg, -1)},
                                            {"meta", m.dump()},
                                            {"fingerprint", meta.teacher_fingerprint}};
  const auto tmp = path.string() + ".tmp";
  write_safetensors(tmp, tensors, header);
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  std::map<std::string, std::string> header;
  auto tensors = read_safetensors(path, &header);
  if (header["format"] != kCheckpointFormat)
    throw IntegrityError(path.string() + " is not a b2p checkpoint");
  int version = 0;
  try {
    version = std::stoi(header["version"]);
  } catch (const std::exception&) {
    throw IntegrityError(path.string() + ": unreadable checkpoint version");
  }
  if (version < 1 || version > kCheckpointVersion)
    throw IntegrityError(path.string() + ": unsupported checkpoint version " + header["version"]);
  Checkpoint ck;
  ck.config = config_from_json(header["config"]);
  try {
    const json m = json::parse(header["meta"]);
    ck.meta.step = m.at("step").get<long>();
    ck.meta.epoch = m.at("epoch").get<int>();
    ck.meta.metric_name = m.at("metric_name").get<std::string>();
    if (!m.at("metric").is_null()) ck.meta.metric = m.at("metric").get<double>();
    ck.meta.config_hash = m.at("config_hash").get<std::string>();
    ck.meta.teacher_fingerprint = m.at("teacher_fingerprint").get<std::string>();
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": bad checkpoint meta: " + e.what());
  }
  for (auto& [name, t] : tensors) {
    if (name.starts_with("model/"))
      ck.model.emplace(name.substr(6), std::move(t));
    else if (name.starts_with("ema/"))
      ck.ema.emplace(name.substr(4), std::move(t));
  }
  return ck;
}

std::unique_ptr<Student> student_from_checkpoint(const Checkpoint& ckpt, bool use_ema) {
  ModelConfig mc = ckpt.config.model;
  mc.backbone.weights.clear();  // every tensor is in the checkpoint
  auto model = std::make_unique<Student>(mc);
  if (use_ema && !ckpt.ema.empty())
    model->load_state(ckpt.ema);
  else
    model->load_state(ckpt.model);
  return model;
}

}  // namespace b2p
