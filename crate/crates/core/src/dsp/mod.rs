//! Spectrogram primitives: WAV input, STFT, mel projection, log compression,
//! Gaussian filtering and the MELS container.

mod audio;
mod blur;
mod mel;
mod mels_io;
mod stft;

pub use audio::{load_wav, write_wav_f32, write_wav_pcm16, AudioBuffer};
pub use blur::{gaussian_blur_2d, gaussian_kernel, GaussianKernel};
pub use mel::{
    hz_to_mel, log_compress, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig,
    MelFilterbank, MelSpectrogram, DEFAULT_LOG_FLOOR,
};
pub use mels_io::{read_mels, read_mels_from, write_mels, write_mels_to, MELS_MAGIC, MELS_VERSION};
pub use stft::{stft_magnitude, stft_frame_count, Window};

/// Maps an out-of-range index onto `0..n` by mirroring about the end samples
/// without repeating them (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}
