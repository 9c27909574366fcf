//! Per-language spoken templates. `{name}` is the entity name, `{text}` the
//! retrieved response, `{date}`/`{time}`/`{party}` booking values.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Templates {
    pub language: &'static str,
    pub review: &'static str,
    pub menu: &'static str,
    pub photo: &'static str,
    pub no_results: &'static str,
    pub reset: &'static str,
    pub pick_first: &'static str,
    pub ask_date: &'static str,
    pub ask_time: &'static str,
    pub ask_party: &'static str,
    pub bad_party: &'static str,
    pub confirmed: &'static str,
}

const EN: Templates = Templates {
    language: "en",
    review: "One review of {name} said {text}",
    menu: "The menu of {name} includes {text}",
    photo: "Here is a photo from {name}",
    no_results: "Sorry, I could not find anything about that among the remaining restaurants.",
    reset: "Okay, let's start again. What are you looking for?",
    pick_first: "Please choose a restaurant first, then I can book a table.",
    ask_date: "For which day would you like to book at {name}?",
    ask_time: "At what time?",
    ask_party: "For how many people?",
    bad_party: "I can book tables for 1 to 50 people. For how many people?",
    confirmed: "Your table at {name} is booked for {party} on {date} at {time}.",
};

const DE: Templates = Templates {
    language: "de",
    review: "Eine Bewertung von {name} sagte: {text}",
    menu: "Die Speisekarte von {name} enthält {text}",
    photo: "Hier ist ein Foto von {name}",
    no_results: "Leider habe ich dazu unter den verbleibenden Restaurants nichts gefunden.",
    reset: "Gut, fangen wir von vorne an. Wonach suchen Sie?",
    pick_first: "Bitte wählen Sie zuerst ein Restaurant aus, dann kann ich einen Tisch reservieren.",
    ask_date: "Für welchen Tag möchten Sie bei {name} reservieren?",
    ask_time: "Um wie viel Uhr?",
    ask_party: "Für wie viele Personen?",
    bad_party: "Ich kann Tische für 1 bis 50 Personen reservieren. Für wie viele Personen?",
    confirmed: "Ihr Tisch bei {name} ist für {party} Personen am {date} um {time} reserviert.",
};

const ES: Templates = Templates {
    language: "es",
    review: "Una reseña de {name} decía: {text}",
    menu: "El menú de {name} incluye {text}",
    photo: "Aquí hay una foto de {name}",
    no_results: "Lo siento, no encontré nada sobre eso entre los restaurantes restantes.",
    reset: "De acuerdo, empecemos de nuevo. ¿Qué está buscando?",
    pick_first: "Por favor, elija primero un restaurante y luego podré reservar una mesa.",
    ask_date: "¿Para qué día desea reservar en {name}?",
    ask_time: "¿A qué hora?",
    ask_party: "¿Para cuántas personas?",
    bad_party: "Puedo reservar mesas para 1 a 50 personas. ¿Para cuántas personas?",
    confirmed: "Su mesa en {name} está reservada para {party} personas el {date} a las {time}.",
};

const TABLES: [&Templates; 3] = [&EN, &DE, &ES];

/// Templates for `language`, falling back to English.
pub fn templates(language: &str) -> &'static Templates {
    TABLES
        .iter()
        .find(|t| t.language == language)
        .copied()
        .unwrap_or(&EN)
}

/// Replaces `{key}` placeholders.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}
