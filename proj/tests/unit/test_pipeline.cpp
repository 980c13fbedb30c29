#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "deepdemand/harness/pipeline.hpp"

using namespace deepdemand;
namespace fs = std::filesystem;

namespace {

io::Config small_config() {
    std::istringstream in(
        "consumers = 300\nitems = 40\nweeks = 10\nuser_dim = 16\nitem_dim = 16\ntaste_rank = 4\ncategories = 4\n"
        "tower.epochs = 3\nfit.epochs = 10\ncf.consumers = 150\ncf.designs = 8\n"
        "hedonic.cohort = 30\nhedonic.months = 6\ngbt.trees = 30\nhedonic.stress_draws = 20\n"
        "event.units = 30\ncluster.ks = 2,3,4\n");
    return io::Config::parse(in, "small");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Pipeline, WritesEveryReportAndIsDeterministic) {
    const fs::path a = fs::temp_directory_path() / "dd_pipeline_a";
    const fs::path b = fs::temp_directory_path() / "dd_pipeline_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const auto ra = harness::run_pipeline(small_config(), 11, a);
    const auto rb = harness::run_pipeline(small_config(), 11, b);
    ASSERT_EQ(ra.files.size(), rb.files.size());
    EXPECT_GE(ra.files.size(), 15u);
    for (const auto& f : ra.files) {
        const std::string body = slurp(f);
        const auto lines = std::count(body.begin(), body.end(), '\n');
        EXPECT_GE(lines, 2) << f;
        EXPECT_EQ(body, slurp(b / f.filename())) << f;
    }
    EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
    EXPECT_EQ(slurp(a / "model.bin"), slurp(b / "model.bin"));
    const auto stored = io::load_model(a / "model.bin");
    EXPECT_EQ(stored.model.spec.classes, 2u);
}

TEST(Pipeline, RejectsUnknownOwnership) {
    EXPECT_THROW(harness::ownership("cartel", 3), ContractError);
}
