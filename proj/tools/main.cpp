#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "semi/pipeline.hpp"

namespace {

semi::ExperimentConfig resolve_config(const std::string& config_path,
                                      const std::vector<std::string>& overrides) {
    return semi::load_config(config_path.empty() ? std::filesystem::path{}
                                                 : std::filesystem::path(config_path),
                             overrides);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"sample-efficient modality integration on a synthetic benchmark"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "JSON config file (defaults apply when omitted)");
    app.add_option("--set", overrides, "override a config key, e.g. --set stage2.rank=16");

    auto* stage1 = app.add_subcommand("stage1", "pre-train the shared projector");
    auto* stage2 = app.add_subcommand("stage2", "train the adapter-generating hypernetwork");

    auto* adapt = app.add_subcommand("adapt", "few-shot adaptation of one held-out modality");
    std::string method = "semi";
    int enc_dim = -1;
    int shots = 8;
    std::uint64_t run_seed = 0;
    adapt->add_option("--method", method, "semi | ft_projector | projector | lora");
    adapt->add_option("--enc-dim", enc_dim, "held-out encoder output dimension (default d_h)");
    adapt->add_option("--shots", shots, "few-shot sample count");
    adapt->add_option("--run-seed", run_seed, "adaptation seed");

    auto* benchmark = app.add_subcommand("benchmark", "full sample-efficiency sweep");
    auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");

    CLI11_PARSE(app, argc, argv);

    try {
        semi::ExperimentConfig cfg = resolve_config(config_path, overrides);
        std::filesystem::create_directories(cfg.out_dir);

        if (stage1->parsed()) {
            semi::cmd_stage1(cfg);
            std::cout << "stage1 complete: " << semi::run_paths(cfg).psi_ckpt().string() << "\n";
        } else if (stage2->parsed()) {
            semi::cmd_stage2(cfg);
            std::cout << "stage2 complete: " << semi::run_paths(cfg).theta_ckpt().string() << "\n";
        } else if (adapt->parsed()) {
            if (enc_dim < 0) enc_dim = cfg.d_h;
            semi::MetricsRow row = semi::cmd_adapt(cfg, method, enc_dim, shots, run_seed);
            std::cout << semi::metrics_csv_header() << "\n" << semi::format_metrics_row(row) << "\n";
        } else if (benchmark->parsed()) {
            semi::BenchmarkResult result = semi::cmd_benchmark(cfg);
            std::cout << "benchmark complete: " << result.rows.size() << " rows -> "
                      << semi::run_paths(cfg).benchmark_csv().string() << "\n";
        } else if (ablate->parsed()) {
            auto rows = semi::cmd_ablate(cfg);
            std::cout << "ablations complete: " << rows.size() << " variants -> "
                      << semi::run_paths(cfg).ablations_csv().string() << "\n";
        }
        return 0;
    } catch (const semi::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const semi::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const semi::TrainingError& e) {
        std::cerr << "training failure: " << e.what() << "\n";
        return 2;
    } catch (const semi::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
