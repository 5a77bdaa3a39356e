#pragma once

// Runs the whole command-line pipeline into one directory and collects every
// produced byte, so runs can be compared.

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "organrag/cli.hpp"
#include "support.hpp"

namespace testing_support {

struct CliResult {
    int code = 0;
    std::string out, err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = organrag::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

/// gen-synthetic, build-db, eval-retrieval, decode and prep-train. Stdout of
/// each step is saved next to its files. Returns the first failing step's
/// message, or an empty string.
inline std::string run_pipeline(const std::filesystem::path& dir, const std::string& seed, const std::string& threads,
                                const std::string& studies = "60") {
    const std::string d = dir.string();
    const std::vector<std::pair<std::string, std::vector<std::string>>> steps{
        {"gen", {"gen-synthetic", "--seed", seed, "--studies", studies, "--out", d + "/corpus"}},
        {"build",
         {"build-db", "--paragraphs", d + "/corpus/paragraphs", "--sent-emb", d + "/corpus/sentence_emb.aemb",
          "--img-emb", d + "/corpus/image_emb", "--labels", d + "/corpus/labels.csv", "--out", d + "/db"}},
        {"eval",
         {"eval-retrieval", "--db", d + "/db", "--labels", d + "/corpus/labels.csv", "--organ", "all", "--modality",
          "all", "--threads", threads, "--out", d + "/eval.jsonl"}},
        {"decode",
         {"decode", "--db", d + "/db", "--policy", "adaptive:4", "--script", d + "/corpus/script.jsonl",
          "--trace-out", d + "/trace.jsonl"}},
        {"prep",
         {"prep-train", "--db", d + "/db", "--reports", d + "/corpus/reports.jsonl", "--perplexities",
          d + "/corpus/perplexities.jsonl", "--seed", seed, "--threads", threads, "--out", d + "/samples.jsonl"}},
    };
    for (const auto& [name, args] : steps) {
        const auto r = run_cli(args);
        write_file(dir / ("stdout_" + name + ".txt"), r.out);
        if (r.code != 0) return name + " exited " + std::to_string(r.code) + ": " + r.err;
    }
    return {};
}

/// Relative path -> contents for every regular file under `dir`.
inline std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
    return out;
}

}  // namespace testing_support
