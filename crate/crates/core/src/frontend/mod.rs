//! Waveform → log-mel grid → 16×16 patch sequence.

mod fbank;
mod patch;
mod wav;

pub use fbank::{compute_fbank, hz_to_mel, mel_filterbank, mel_to_hz, FbankConfig, FbankGrid, LOG_FLOOR};
pub use patch::{patchify, unpatchify, PatchSet, PATCH_DIM, PATCH_SIDE};
pub use wav::{read_wav, write_wav, Waveform, SAMPLE_RATE};
