// falcon -- command line front end for the gate-racing simulation stack.
//
// Subcommands mirror the stages of the pipeline: track management, perception
// data generation and training, error-model fitting, controller data
// collection and training, and closed-loop evaluation. `falcon pipeline` runs
// everything end to end.
//
// Exit codes: 0 success, 1 stage failure (e.g. divergence, failed thresholds),
// 2 usage or configuration error.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "falcon/geometry.hpp"
#include "falcon/serialize.hpp"

namespace fs = std::filesystem;

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

// --- falcon tracks ---------------------------------------------------------

int cmd_tracks(const std::string& export_dir, const std::string& import_path) {
    if (!import_path.empty()) {
        const falcon::Track t =
            falcon::track_from_json(falcon::Json::parse(read_text_file(import_path)));
        std::cout << t.name << ": " << t.gates.size() << " gates, laps "
                  << (t.laps_close_cycle ? "close" : "do not close") << " the cycle\n";
        return 0;
    }
    const auto tracks = falcon::builtin_tracks();
    if (!export_dir.empty()) {
        for (const auto& t : tracks) {
            const fs::path path = fs::path(export_dir) / (t.name + ".json");
            write_text_file(path, falcon::to_json(t).dump(2) + "\n");
            std::cout << "wrote " << path.string() << "\n";
        }
        return 0;
    }
    for (const auto& t : tracks) {
        std::cout << t.name << ": " << t.gates.size() << " gates, laps "
                  << (t.laps_close_cycle ? "close" : "do not close") << " the cycle\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"falcon: simulation, perception and control for desk-scale gate racing"};
    app.require_subcommand(1);

    // tracks
    std::string tracks_export_dir;
    std::string tracks_import_path;
    auto* tracks = app.add_subcommand("tracks", "List, export or validate track definitions");
    tracks->add_option("--export", tracks_export_dir, "Write builtin tracks as JSON into DIR");
    tracks->add_option("--import", tracks_import_path, "Parse and validate a track JSON file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (tracks->parsed()) return cmd_tracks(tracks_export_dir, tracks_import_path);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
