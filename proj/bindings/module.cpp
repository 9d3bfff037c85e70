#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lbi/data.hpp"
#include "lbi/env.hpp"
#include "lbi/vision.hpp"

namespace py = pybind11;
using namespace lbi;

namespace {

py::array_t<float> to_array(const std::vector<float>& v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<float> frame_array(const vision::Frame& f) {
  py::array_t<float> out({vision::kFrameH, vision::kFrameW, vision::kFrameC});
  std::copy(f.pixels.begin(), f.pixels.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "native core of the lbi pipeline";

  py::class_<env::Scenario>(m, "Scenario")
      .def_static("load", &env::Scenario::load)
      .def_static("from_json",
                  [](const std::string& text) { return env::Scenario::from_json(json::parse(text)); })
      .def_property_readonly("name", [](const env::Scenario& s) { return s.name; })
      .def_property_readonly("n_allies", &env::Scenario::n_allies)
      .def_property_readonly("n_enemies", &env::Scenario::n_enemies)
      .def_property_readonly("action_count", &env::Scenario::action_count)
      .def("to_json", [](const env::Scenario& s) { return s.to_json().dump(2); });

  py::class_<env::EnvState>(m, "EnvState")
      .def_property_readonly("step_index", [](const env::EnvState& s) { return s.step_index; })
      .def_property_readonly("hp", [](const env::EnvState& s) { return s.hp; })
      .def_property_readonly("positions", [](const env::EnvState& s) { return s.positions; });

  py::class_<env::BattleEnv>(m, "BattleEnv")
      .def(py::init<env::Scenario>())
      .def("reset",
           [](const env::BattleEnv& e, uint64_t seed) {
             env::ResetResult r = e.reset(seed);
             return py::make_tuple(r.state, to_array(r.state_vec));
           })
      .def("step",
           [](const env::BattleEnv& e, const env::EnvState& st, const std::vector<int>& acts) {
             env::StepResult r = e.step(st, acts);
             return py::make_tuple(r.state, r.global_reward, r.terminated, r.won);
           })
      .def("observe",
           [](const env::BattleEnv& e, const env::EnvState& st, int agent) {
             return to_array(e.observe(st, agent));
           })
      .def("available_actions",
           [](const env::BattleEnv& e, const env::EnvState& st, int agent) {
             return e.available_actions(st, agent).mask;
           })
      .def("state_vector", [](const env::BattleEnv& e, const env::EnvState& st) {
        return to_array(e.state_vector(st));
      });

  m.def("render", [](const env::Scenario& s, const env::EnvState& st) {
    return frame_array(vision::render(s, st));
  });
  m.def("describe_terminal", [](const env::Scenario& s, const env::EnvState& st) {
    return vision::describe_terminal(s, st).text();
  });

  m.def("collect", [](const env::Scenario& s, const std::string& policy, int episodes,
                      uint64_t seed, const std::string& out_dir) {
    data::EpisodeStore store = data::collect(s, data::parse_policy_kind(policy), episodes, seed);
    store.save(out_dir);
    data::Stats stats = store.stats();
    return stats.to_json().dump(2);
  });
}
