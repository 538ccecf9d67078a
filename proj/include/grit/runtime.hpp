#pragma once

namespace grit {

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Training allocates and frees the same few hundred megabytes every batch,
/// and fresh mappings pay a page fault per 4 KiB on first touch.
void tune_allocator();

}  // namespace grit
