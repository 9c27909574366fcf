//! Slot filling for table bookings: date, time and party size extracted
//! with fixed patterns, prompted for in that order.

use std::sync::LazyLock;

use chrono::{Datelike, Duration, NaiveDate, NaiveTime, Weekday};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dialogue::templates::{fill, templates};
use crate::dialogue::DialogueState;
use crate::error::{Error, Result};

pub const MAX_PARTY: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Date,
    Time,
    PartySize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingSlots {
    pub date: Option<NaiveDate>,
    pub time: Option<NaiveTime>,
    pub party_size: Option<u32>,
}

impl BookingSlots {
    pub fn first_missing(&self) -> Option<Slot> {
        if self.date.is_none() {
            Some(Slot::Date)
        } else if self.time.is_none() {
            Some(Slot::Time)
        } else if self.party_size.is_none() {
            Some(Slot::PartySize)
        } else {
            None
        }
    }

    pub fn is_complete(&self) -> bool {
        self.first_missing().is_none()
    }

    /// Overwrites slots the update mentions. Returns `false` if a party size
    /// outside `1..=MAX_PARTY` was given (and ignored).
    pub fn apply(&mut self, update: &SlotUpdate) -> bool {
        if let Some(d) = update.date {
            self.date = Some(d);
        }
        if let Some(t) = update.time {
            self.time = Some(t);
        }
        match update.party_size {
            Some(n) if (1..=MAX_PARTY as i64).contains(&n) => {
                self.party_size = Some(n as u32);
                true
            }
            Some(_) => false,
            None => true,
        }
    }
}

/// Values found in one utterance. `party_size` is unvalidated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotUpdate {
    pub date: Option<NaiveDate>,
    pub time: Option<NaiveTime>,
    pub party_size: Option<i64>,
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

const MONTHS: [&str; 12] = [
    "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
];

const NUM: &str = r"(\d{1,3}|zero|one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|thirteen|fourteen|fifteen|sixteen|seventeen|eighteen|nineteen|twenty)";
const MONTH: &str = r"(jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)";

fn re(p: &str) -> Regex {
    Regex::new(p).expect("static pattern")
}

static ISO_DATE: LazyLock<Regex> = LazyLock::new(|| re(r"\b(\d{4})-(\d{2})-(\d{2})\b"));
static DAY_MONTH: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"\b(\d{{1,2}})(?:st|nd|rd|th)?(?:\s+of)?\s+{MONTH}\b")));
static MONTH_DAY: LazyLock<Regex> = LazyLock::new(|| re(&format!(r"\b{MONTH}\s+(\d{{1,2}})(?:st|nd|rd|th)?\b")));
static RELATIVE: LazyLock<Regex> = LazyLock::new(|| re(r"\b(day after tomorrow|tomorrow|today|tonight)\b"));
static WEEKDAY: LazyLock<Regex> = LazyLock::new(|| {
    re(r"\b(next\s+)?(monday|tuesday|wednesday|thursday|friday|saturday|sunday)\b")
});
static TIME_12H: LazyLock<Regex> =
    LazyLock::new(|| re(r"\b(\d{1,2})(?:[:.](\d{2}))?\s*(am|pm|a\.m\.|p\.m\.)"));
static TIME_24H: LazyLock<Regex> = LazyLock::new(|| re(r"\b([01]?\d|2[0-3])[:h]([0-5]\d)\b"));
static TIME_NOON: LazyLock<Regex> = LazyLock::new(|| re(r"\b(noon|midday)\b"));
static TIME_AT: LazyLock<Regex> = LazyLock::new(|| re(r"\bat\s+(\d{1,2})\b"));
static PARTY_BEFORE: LazyLock<Regex> =
    LazyLock::new(|| re(&format!(r"\b(?:party of|table for|for)\s+{NUM}\b")));
static PARTY_AFTER: LazyLock<Regex> = LazyLock::new(|| {
    re(&format!(r"\b{NUM}\s+(?:people|persons|person|guests|guest|diners|adults|of us)\b"))
});
static BARE_NUMBER: LazyLock<Regex> = LazyLock::new(|| re(&format!(r"^\s*{NUM}\s*[.!]?\s*$")));

fn parse_num(s: &str) -> Option<i64> {
    s.parse()
        .ok()
        .or_else(|| NUMBER_WORDS.iter().position(|w| *w == s).map(|i| i as i64))
}

fn month_index(s: &str) -> Option<u32> {
    MONTHS.iter().position(|m| s.starts_with(m)).map(|i| i as u32 + 1)
}

/// A day and month without a year: this year, or next year if already past.
fn upcoming(today: NaiveDate, month: u32, day: u32) -> Option<NaiveDate> {
    let d = NaiveDate::from_ymd_opt(today.year(), month, day)?;
    if d < today {
        NaiveDate::from_ymd_opt(today.year() + 1, month, day)
    } else {
        Some(d)
    }
}

fn weekday(s: &str) -> Weekday {
    match s {
        "monday" => Weekday::Mon,
        "tuesday" => Weekday::Tue,
        "wednesday" => Weekday::Wed,
        "thursday" => Weekday::Thu,
        "friday" => Weekday::Fri,
        "saturday" => Weekday::Sat,
        _ => Weekday::Sun,
    }
}

/// Hour without am/pm: 1–11 are read as evening, since bookings are mostly
/// for dinner.
fn bare_hour(h: u32) -> Option<NaiveTime> {
    match h {
        1..=11 => NaiveTime::from_hms_opt(h + 12, 0, 0),
        12..=23 => NaiveTime::from_hms_opt(h, 0, 0),
        _ => None,
    }
}

/// Blanks out the matched span so later patterns do not see it again.
fn take(text: &mut String, start: usize, end: usize) {
    text.replace_range(start..end, &" ".repeat(end - start));
}

fn extract_date(text: &mut String, today: NaiveDate) -> Option<NaiveDate> {
    if let Some(c) = ISO_DATE.captures(text) {
        let m = c.get(0).unwrap();
        let d = NaiveDate::from_ymd_opt(c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?);
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return d;
    }
    for (pattern, day_group, month_group) in [(&*DAY_MONTH, 1, 2), (&*MONTH_DAY, 2, 1)] {
        if let Some(c) = pattern.captures(text) {
            let m = c.get(0).unwrap();
            let day: u32 = c[day_group].parse().ok()?;
            let month = month_index(&c[month_group])?;
            let (s, e) = (m.start(), m.end());
            take(text, s, e);
            return upcoming(today, month, day);
        }
    }
    if let Some(c) = RELATIVE.captures(text) {
        let m = c.get(0).unwrap();
        let offset = match &c[1] {
            "day after tomorrow" => 2,
            "tomorrow" => 1,
            _ => 0,
        };
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return Some(today + Duration::days(offset));
    }
    if let Some(c) = WEEKDAY.captures(text) {
        let m = c.get(0).unwrap();
        let target = weekday(&c[2]).num_days_from_monday() as i64;
        let now = today.weekday().num_days_from_monday() as i64;
        let mut ahead = (target - now).rem_euclid(7);
        if ahead == 0 && c.get(1).is_some() {
            ahead = 7;
        }
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return Some(today + Duration::days(ahead));
    }
    None
}

fn extract_time(text: &mut String) -> Option<NaiveTime> {
    if let Some(c) = TIME_12H.captures(text) {
        let m = c.get(0).unwrap();
        let h: u32 = c[1].parse().ok()?;
        let min: u32 = c.get(2).map_or(Some(0), |x| x.as_str().parse().ok())?;
        let pm = c[3].starts_with('p');
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        if !(1..=12).contains(&h) {
            return None;
        }
        let h24 = match (h, pm) {
            (12, false) => 0,
            (12, true) => 12,
            (h, true) => h + 12,
            (h, false) => h,
        };
        return NaiveTime::from_hms_opt(h24, min, 0);
    }
    if let Some(c) = TIME_24H.captures(text) {
        let m = c.get(0).unwrap();
        let t = NaiveTime::from_hms_opt(c[1].parse().ok()?, c[2].parse().ok()?, 0);
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return t;
    }
    if let Some(m) = TIME_NOON.find(text) {
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return NaiveTime::from_hms_opt(12, 0, 0);
    }
    if let Some(c) = TIME_AT.captures(text) {
        let m = c.get(0).unwrap();
        let t = bare_hour(c[1].parse().ok()?);
        let (s, e) = (m.start(), m.end());
        take(text, s, e);
        return t;
    }
    None
}

fn extract_party(text: &str) -> Option<i64> {
    PARTY_AFTER
        .captures(text)
        .or_else(|| PARTY_BEFORE.captures(text))
        .and_then(|c| parse_num(&c[1]))
}

/// Finds slot values in `utterance`. `awaiting` is the slot the last prompt
/// asked for; a bare number then answers that prompt.
pub fn extract_slots(utterance: &str, today: NaiveDate, awaiting: Option<Slot>) -> SlotUpdate {
    let mut text = utterance.to_lowercase();
    let date = extract_date(&mut text, today);
    let time = extract_time(&mut text);
    let mut update = SlotUpdate {
        date,
        time,
        party_size: extract_party(&text),
    };
    if let Some(c) = BARE_NUMBER.captures(&text) {
        let n = parse_num(&c[1]);
        match awaiting {
            Some(Slot::PartySize) if update.party_size.is_none() => update.party_size = n,
            Some(Slot::Time) if update.time.is_none() => {
                update.time = n.and_then(|h| u32::try_from(h).ok()).and_then(bare_hour)
            }
            _ => {}
        }
    }
    update
}

/// Record emitted when every slot is filled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub entity_id: String,
    pub date: String,
    pub time: String,
    pub party_size: u32,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookingTurn {
    pub prompt: String,
    pub slots: BookingSlots,
    pub complete: bool,
    /// Slot whose value was rejected this turn.
    pub rejected: Option<Slot>,
    pub confirmation: Option<Confirmation>,
}

/// One booking turn: fills what the utterance provides and asks for the
/// first missing slot. Does not modify `state`; the caller stores `slots`.
pub fn booking_step(state: &DialogueState, utterance: &str, entity_name: &str, today: NaiveDate) -> Result<BookingTurn> {
    if state.relevant.len() != 1 {
        return Err(Error::NoSelectedEntity(state.relevant.len()));
    }
    let t = templates(&state.language);
    let mut slots = state.booking.clone();
    let update = extract_slots(utterance, today, slots.first_missing());
    let rejected = (!slots.apply(&update)).then_some(Slot::PartySize);
    let name = [("name", entity_name)];
    let (prompt, confirmation) = match (rejected, slots.first_missing()) {
        (Some(_), _) => (t.bad_party.to_string(), None),
        (None, Some(Slot::Date)) => (fill(t.ask_date, &name), None),
        (None, Some(Slot::Time)) => (t.ask_time.to_string(), None),
        (None, Some(Slot::PartySize)) => (t.ask_party.to_string(), None),
        (None, None) => {
            let date = slots.date.expect("complete").format("%Y-%m-%d").to_string();
            let time = slots.time.expect("complete").format("%H:%M").to_string();
            let party = slots.party_size.expect("complete");
            let prompt = fill(
                t.confirmed,
                &[("name", entity_name), ("date", &date), ("time", &time), ("party", &party.to_string())],
            );
            let record = Confirmation {
                entity_id: state.relevant.iter().next().expect("one entity").clone(),
                date,
                time,
                party_size: party,
                session_id: state.session_id.clone(),
            };
            (prompt, Some(record))
        }
    };
    Ok(BookingTurn {
        prompt,
        complete: slots.is_complete() && rejected.is_none(),
        slots,
        rejected,
        confirmation: confirmation.filter(|_| rejected.is_none()),
    })
}
