#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "labelcal/common.hpp"

// Runs `stmt` and checks that it throws labelcal::Error with the given code.
#define EXPECT_ERROR_CODE(stmt, expected)                                                    \
  do {                                                                                       \
    try {                                                                                    \
      stmt;                                                                                  \
      ADD_FAILURE() << "expected " << labelcal::name(expected) << ", nothing thrown";        \
    } catch (const labelcal::Error& e) {                                                     \
      EXPECT_EQ(labelcal::name(e.code()), labelcal::name(expected)) << e.what();             \
    }                                                                                        \
  } while (0)

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "labelcal-" + tag;
    if (info) name += std::string("-") + info->test_suite_name() + "-" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};
