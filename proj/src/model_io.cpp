#include "cfdistill/model_io.hpp"

#include <fstream>

#include "cfdistill/mlp.hpp"

namespace cfdistill {

nlohmann::json idm_to_json(const IdmParams& p) {
  return {{"format", "cfdistill-idm"},
          {"version", 1},
          {"params", {{"v0", p.v0}, {"T", p.T}, {"s0", p.s0}, {"a_max", p.a_max}, {"b", p.b}}}};
}

IdmParams idm_from_json(const nlohmann::json& j) {
  const auto& jp = j.contains("params") ? j.at("params") : j;
  IdmParams p;
  p.v0 = jp.value("v0", p.v0);
  p.T = jp.value("T", p.T);
  p.s0 = jp.value("s0", p.s0);
  p.a_max = jp.value("a_max", p.a_max);
  p.b = jp.value("b", p.b);
  p.validate();
  return p;
}

void save_idm(const std::filesystem::path& path, const IdmParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << idm_to_json(p).dump(1) << '\n';
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

std::unique_ptr<CarFollowingModel> load_model(const std::filesystem::path& path) {
  const nlohmann::json j = read_json_file(path);
  const std::string format = j.value("format", std::string());
  if (format == "cfdistill-mlp") return std::make_unique<MlpModel>(MlpModel::from_json(j));
  if (format == "cfdistill-idm") return std::make_unique<IdmModel>(idm_from_json(j));
  throw Error(path.string() + ": unknown model format '" + format + "'");
}

}  // namespace cfdistill
