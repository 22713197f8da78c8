// Prints reference scores and the calibrated medium noise for each environment.
#include <iostream>

#include "CLI11.hpp"
#include "lmrl/envlab.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Calibrate medium-tier behavior noise"};
  std::uint64_t seed = 0;
  int episodes = 200;
  app.add_option("--seed", seed, "episode seed");
  app.add_option("--episodes", episodes, "episodes per estimate");
  CLI11_PARSE(app, argc, argv);

  for (const char* name : {"gridworld", "pointmass"}) {
    const auto env = lmrl::make_environment(name);
    const auto ref = lmrl::reference_scores(*env, seed, episodes);
    const float noise = lmrl::calibrate_medium_noise(*env, seed, episodes);
    std::cout << name << ": random " << ref.random_score << ", expert " << ref.expert_score << ", midpoint "
              << 0.5 * (ref.random_score + ref.expert_score) << ", calibrated noise " << noise << " (return "
              << lmrl::behavior_return(*env, noise, seed, episodes) << "), built-in " << env->medium_noise()
              << " (return " << lmrl::behavior_return(*env, env->medium_noise(), seed, episodes) << ")\n";
  }
  return 0;
}
