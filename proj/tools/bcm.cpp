#include "bcm/scenario.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

void print_row(const bcm::DiagnosticsRow& r) {
    std::printf("%4zu  %12.5e  %13.6e  %13.6e  %9.4f  %9.4f\n", r.iter, r.sum_abs_dT, r.q_cfd, r.q_ctd, r.tmax_cfd,
                r.tmax_ctd);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Barely coupled rotor-stator gap solver"};
    app.require_subcommand(1);

    std::string config_path;
    std::string output_dir;
    std::size_t outer_iters = 0;
    std::string json_summary;
    bool quiet = false;

    auto* run = app.add_subcommand("run", "Run a scenario and write its outputs");
    run->add_option("config", config_path, "Scenario TOML file")->required();
    run->add_option("--output-dir", output_dir, "Overrides output.directory");
    run->add_option("--outer-iters", outer_iters, "Overrides coupling.outer_iterations");
    run->add_option("--json-summary", json_summary, "Also write the run summary here ('-' for stdout)");
    run->add_flag("-q,--quiet", quiet, "Suppress the per-iteration table");

    auto* validate = app.add_subcommand("validate", "Check a scenario file and report every problem");
    validate->add_option("config", config_path, "Scenario TOML file")->required();

    auto* mesh = app.add_subcommand("mesh", "Write the fluid and solid meshes as VTK");
    mesh->add_option("config", config_path, "Scenario TOML file")->required();
    mesh->add_option("--output-dir", output_dir, "Overrides output.directory");

    app.add_subcommand("version", "Print the version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    if (app.got_subcommand("version")) {
        std::printf("bcm %s\n", BCM_VERSION);
        return kOk;
    }

    bcm::ScenarioConfig config;
    try {
        config = bcm::load_config(config_path);
    } catch (const bcm::ConfigError& e) {
        std::fprintf(stderr, "%s: %s\n", config_path.c_str(), e.what());
        return kFailure;
    }

    if (validate->parsed()) {
        std::printf("%s: ok (hash %s)\n", config_path.c_str(), bcm::config_hash(config).c_str());
        return kOk;
    }

    bcm::RunOverrides overrides;
    if (!output_dir.empty()) overrides.output_dir = output_dir;

    if (mesh->parsed()) {
        try {
            for (const auto& f : bcm::write_meshes(bcm::apply_overrides(config, overrides)))
                std::printf("wrote %s\n", f.string().c_str());
        } catch (const std::exception& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return kFailure;
        }
        return kOk;
    }

    if (run->count("--outer-iters")) overrides.outer_iterations = outer_iters;
    const auto outcome = bcm::run_scenario(config, overrides);
    if (!quiet && !outcome.diagnostics.rows.empty()) {
        std::printf("iter  sum|dT| (K)   q_cfd (erg/s)  q_ctd (erg/s)  Tmax_cfd   Tmax_ctd\n");
        for (const auto& r : outcome.diagnostics.rows) print_row(r);
    }
    if (outcome.couette_error && !quiet) std::printf("Couette L-inf error: %.4e\n", *outcome.couette_error);

    if (!json_summary.empty()) {
        const auto text = bcm::summary_json(outcome);
        if (json_summary == "-") {
            std::fputs(text.c_str(), stdout);
        } else {
            std::ofstream out(json_summary, std::ios::binary | std::ios::trunc);
            if (!(out << text)) {
                std::fprintf(stderr, "error: cannot write %s\n", json_summary.c_str());
                return kFailure;
            }
        }
    }
    if (outcome.status != 0) {
        std::fprintf(stderr, "error: %s\n", outcome.error.c_str());
        return kFailure;
    }
    if (!quiet) std::printf("outputs in %s\n", outcome.output_dir.string().c_str());
    return kOk;
}
