#pragma once

#include <string>

// Shared hand-written fixtures.

namespace advasm::testing {

// Six-block diamond: L1 branches to L2/L3, both reach L4 (L2 conditionally,
// then through L3), L4 branches to the two returning blocks L5/L6.
// 6 blocks, 7 edges; the obligatory blocks are L1 and L4.
inline const char* kDiamondText = R"(fn diamond:
L1:
  cmp rax, 0
  je .L3
L2:
  mov rbx, 1
  jne .L4
L3:
  add rbx, 2
  jmp .L4
L4:
  test rbx, rbx
  je .L6
L5:
  mov rcx, 1
  ret
L6:
  mov rcx, 2
  ret
)";

inline const char* kStraightLineText = R"(fn straight:
  mov rax, 5
  add rax, 3
  ret
)";

// Counted loop: L1 body, conditional back edge, exit block returns.
inline const char* kLoopText = R"(fn loop:
  mov rcx, 4
L1:
  sub rcx, 1
  cmp rcx, 0
  jg .L1
  ret
)";

}  // namespace advasm::testing
