// Copyright (c) 2026, the dgpaq authors.
#pragma once

namespace dgpaq {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace dgpaq
