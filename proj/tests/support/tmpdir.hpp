#pragma once

#include <filesystem>
#include <string>

namespace odhn::testsupport {

// Fresh scratch directory under the build tree, wiped on construction and
// destruction.
struct TmpDir {
    std::filesystem::path path;

    explicit TmpDir(const std::string& name) : path(std::filesystem::current_path() / "test_tmp" / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& leaf) const { return path / leaf; }
};

}  // namespace odhn::testsupport
