// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "szdl/common.hpp"

#define EXPECT_SZDL_ERROR(stmt, expected_code)                                                   \
  do {                                                                                           \
    try {                                                                                        \
      (void)(stmt);                                                                              \
      ADD_FAILURE() << #stmt " did not throw";                                                   \
    } catch (const ::szdl::Error& e) {                                                           \
      EXPECT_EQ(::szdl::to_string(e.code()), ::szdl::to_string(expected_code)) << e.what();      \
    }                                                                                            \
  } while (false)

namespace szdl {

/// Fresh scratch directory under the build tree, emptied on each call.
inline std::filesystem::path test_dir(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "szdl_test_scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace szdl
