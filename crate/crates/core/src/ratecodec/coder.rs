//! Byte-oriented range coder with carry propagation (32-bit range, 64-bit
//! low), driven by integer frequency tables.

const TOP: u32 = 1 << 24;

/// Largest total frequency a table may have.
pub const MAX_TOTAL: u32 = 1 << 16;

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Codes the symbol occupying `[start, start + size)` out of `total`.
    pub fn encode(&mut self, start: u32, size: u32, total: u32) {
        debug_assert!(size > 0 && start + size <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
    r: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
            r: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    /// Past-the-end reads yield zeros; [`Decoder::overrun`] reports them.
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn overrun(&self) -> bool {
        self.pos > self.input.len()
    }

    /// Cumulative frequency of the next symbol; follow with [`Decoder::consume`].
    pub fn peek(&mut self, total: u32) -> u32 {
        self.r = self.range / total;
        (self.code / self.r).min(total - 1)
    }

    pub fn consume(&mut self, start: u32, size: u32) {
        self.code -= start * self.r;
        self.range = self.r * size;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
    }
}

/// Cumulative frequency table over a contiguous alphabet `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u32>,
}

impl FreqTable {
    /// Every frequency must be ≥ 1 and the sum ≤ [`MAX_TOTAL`].
    pub fn new(freqs: &[u32]) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            assert!(f >= 1);
            acc += f;
            cum.push(acc);
        }
        assert!(acc <= MAX_TOTAL);
        Self { cum }
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, enc: &mut Encoder, sym: usize) {
        enc.encode(self.cum[sym], self.cum[sym + 1] - self.cum[sym], self.total());
    }

    pub fn decode(&self, dec: &mut Decoder) -> usize {
        let v = dec.peek(self.total());
        let sym = self.cum.partition_point(|&c| c <= v) - 1;
        dec.consume(self.cum[sym], self.cum[sym + 1] - self.cum[sym]);
        sym
    }
}
